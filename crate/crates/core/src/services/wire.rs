//! Length-prefixed frames with JSON payloads.
//!
//! A frame is `len: u32 LE | msg_type: u8 | payload`, with `len = 1 + |payload|`.
//! Group elements, search tags and ciphertexts travel as standard base64.

use std::io::{self, Read, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{EncryptedId, GroupElement, PrfOutput};

/// Largest accepted payload.
pub const MAX_PAYLOAD: usize = 64 << 20;
/// Counters per `XTOKENS` frame.
pub const XTOKEN_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("frame payload of {0} bytes exceeds the limit")]
    Oversized(usize),
    #[error("zero-length frame")]
    EmptyFrame,
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("invalid payload: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid field {field}: {msg}")]
    Field { field: &'static str, msg: String },
    #[error("unexpected {0} message")]
    Unexpected(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    SearchInit = 1,
    SternCount = 2,
    XTokens = 3,
    Result = 4,
    Query = 5,
    Answer = 6,
    Denied = 7,
    Error = 8,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        use MsgType::*;
        [SearchInit, SternCount, XTokens, Result, Query, Answer, Denied, Error]
            .into_iter()
            .find(|t| *t as u8 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::SearchInit => "SEARCH_INIT",
            MsgType::SternCount => "STERM_COUNT",
            MsgType::XTokens => "XTOKENS",
            MsgType::Result => "RESULT",
            MsgType::Query => "QUERY",
            MsgType::Answer => "ANSWER",
            MsgType::Denied => "DENIED",
            MsgType::Error => "ERROR",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.payload.len());
        out.extend_from_slice(&(1 + self.payload.len() as u32).to_le_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.payload);
        out
    }

    fn check_len(len: u32) -> Result<usize, WireError> {
        if len == 0 {
            return Err(WireError::EmptyFrame);
        }
        let payload = len as usize - 1;
        if payload > MAX_PAYLOAD {
            return Err(WireError::Oversized(payload));
        }
        Ok(payload)
    }

    /// Decodes one frame from the front of `buf`, returning it and the bytes used.
    /// `Ok(None)` means more input is needed.
    pub fn decode(buf: &[u8]) -> Result<Option<(Frame, usize)>, WireError> {
        if buf.len() < 4 {
            return Ok(None);
        }
        let payload_len = Self::check_len(u32::from_le_bytes(buf[..4].try_into().unwrap()))?;
        if buf.len() < 5 {
            return Ok(None);
        }
        let msg_type = MsgType::from_u8(buf[4]).ok_or(WireError::UnknownType(buf[4]))?;
        let end = 5 + payload_len;
        if buf.len() < end {
            return Ok(None);
        }
        let frame = Frame {
            msg_type,
            payload: buf[5..end].to_vec(),
        };
        Ok(Some((frame, end)))
    }

    /// Reads one frame. `Ok(None)` on a clean end of stream.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Frame>, WireError> {
        let mut len = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match r.read(&mut len[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let payload_len = Self::check_len(u32::from_le_bytes(len))?;
        let mut ty = [0u8; 1];
        r.read_exact(&mut ty)?;
        let msg_type = MsgType::from_u8(ty[0]).ok_or(WireError::UnknownType(ty[0]))?;
        let mut payload = vec![0u8; payload_len];
        r.read_exact(&mut payload)?;
        Ok(Some(Frame { msg_type, payload }))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), WireError> {
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }
}

/// Vetter to server: open a search for one sterm.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchInit {
    pub stag: String,
    pub gamma: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_prime: Option<u32>,
}

/// Server to vetter: session handle and the sterm's tuple count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SternCount {
    pub session: String,
    pub count: u64,
}

/// Vetter to server: token rows for counters `first..first + gtoken1.len()`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XTokens {
    pub session: String,
    pub first: u64,
    pub gtoken1: Vec<Vec<String>>,
    pub gtoken2: Vec<Vec<String>>,
    pub last: bool,
}

/// Server to vetter: encrypted IDs or a count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchResult {
    pub session: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u64>,
}

/// User to vetter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub user: String,
    #[serde(rename = "type")]
    pub query_type: String,
    #[serde(rename = "where")]
    pub where_expr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kprime: Option<usize>,
}

/// Vetter to user.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryAnswer {
    #[serde(rename = "type")]
    pub query_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<u64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenyReason {
    Auth,
    Threshold,
    Parse,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::Auth => "auth",
            DenyReason::Threshold => "threshold",
            DenyReason::Parse => "parse",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Denied {
    pub reason: DenyReason,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorCode {
    Unavailable,
    Malformed,
    Session,
    Integrity,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Unavailable => "unavailable",
            ErrorCode::Malformed => "malformed",
            ErrorCode::Session => "session",
            ErrorCode::Integrity => "integrity",
            ErrorCode::Internal => "internal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorReply {
    pub code: ErrorCode,
    pub detail: String,
}

impl ErrorReply {
    pub fn new(code: ErrorCode, detail: impl Into<String>) -> Self {
        ErrorReply {
            code,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    SearchInit(SearchInit),
    SternCount(SternCount),
    XTokens(XTokens),
    Result(SearchResult),
    Query(QueryRequest),
    Answer(QueryAnswer),
    Denied(Denied),
    Error(ErrorReply),
}

fn parse<T: DeserializeOwned>(payload: &[u8]) -> Result<T, WireError> {
    Ok(serde_json::from_slice(payload)?)
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::SearchInit(_) => MsgType::SearchInit,
            Message::SternCount(_) => MsgType::SternCount,
            Message::XTokens(_) => MsgType::XTokens,
            Message::Result(_) => MsgType::Result,
            Message::Query(_) => MsgType::Query,
            Message::Answer(_) => MsgType::Answer,
            Message::Denied(_) => MsgType::Denied,
            Message::Error(_) => MsgType::Error,
        }
    }

    pub fn to_frame(&self) -> Frame {
        let payload = match self {
            Message::SearchInit(m) => serde_json::to_vec(m),
            Message::SternCount(m) => serde_json::to_vec(m),
            Message::XTokens(m) => serde_json::to_vec(m),
            Message::Result(m) => serde_json::to_vec(m),
            Message::Query(m) => serde_json::to_vec(m),
            Message::Answer(m) => serde_json::to_vec(m),
            Message::Denied(m) => serde_json::to_vec(m),
            Message::Error(m) => serde_json::to_vec(m),
        }
        .expect("wire structs always serialize");
        Frame {
            msg_type: self.msg_type(),
            payload,
        }
    }

    pub fn from_frame(frame: &Frame) -> Result<Self, WireError> {
        let p = &frame.payload;
        Ok(match frame.msg_type {
            MsgType::SearchInit => Message::SearchInit(parse(p)?),
            MsgType::SternCount => Message::SternCount(parse(p)?),
            MsgType::XTokens => Message::XTokens(parse(p)?),
            MsgType::Result => Message::Result(parse(p)?),
            MsgType::Query => Message::Query(parse(p)?),
            MsgType::Answer => Message::Answer(parse(p)?),
            MsgType::Denied => Message::Denied(parse(p)?),
            MsgType::Error => Message::Error(parse(p)?),
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), WireError> {
        self.to_frame().write_to(w)
    }

    /// Reads one message. `Ok(None)` on a clean end of stream.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Self>, WireError> {
        match Frame::read_from(r)? {
            Some(f) => Ok(Some(Message::from_frame(&f)?)),
            None => Ok(None),
        }
    }
}

pub fn encode_b64(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

pub fn decode_b64(field: &'static str, s: &str) -> Result<Vec<u8>, WireError> {
    B64.decode(s).map_err(|e| WireError::Field {
        field,
        msg: e.to_string(),
    })
}

pub fn decode_stag(s: &str) -> Result<PrfOutput, WireError> {
    let bytes = decode_b64("stag", s)?;
    if bytes.len() != 16 && bytes.len() != 32 {
        return Err(WireError::Field {
            field: "stag",
            msg: format!("{} bytes", bytes.len()),
        });
    }
    Ok(PrfOutput::from_bytes(&bytes))
}

pub fn encode_rows(rows: &[Vec<GroupElement>]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|row| row.iter().map(|e| encode_b64(e.as_bytes())).collect())
        .collect()
}

pub fn decode_rows(
    field: &'static str,
    rows: &[Vec<String>],
) -> Result<Vec<Vec<GroupElement>>, WireError> {
    rows.iter()
        .map(|row| {
            row.iter()
                .map(|s| {
                    GroupElement::from_bytes(&decode_b64(field, s)?).map_err(|e| {
                        WireError::Field {
                            field,
                            msg: e.to_string(),
                        }
                    })
                })
                .collect()
        })
        .collect()
}

pub fn encode_ciphertexts(cts: &[EncryptedId]) -> Vec<String> {
    cts.iter().map(|c| encode_b64(c.as_bytes())).collect()
}

pub fn decode_ciphertexts(cts: &[String]) -> Result<Vec<EncryptedId>, WireError> {
    cts.iter()
        .map(|s| {
            EncryptedId::from_bytes(&decode_b64("ids", s)?).map_err(|e| WireError::Field {
                field: "ids",
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn session_to_string(id: u128) -> String {
    format!("{id:032x}")
}

pub fn session_from_str(s: &str) -> Result<u128, WireError> {
    if s.len() != 32 {
        return Err(WireError::Field {
            field: "session",
            msg: "expected 32 hex digits".into(),
        });
    }
    u128::from_str_radix(s, 16).map_err(|e| WireError::Field {
        field: "session",
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{base_pow, Scalar};
    use proptest::prelude::*;

    #[test]
    fn frame_layout() {
        let m = Message::SternCount(SternCount {
            session: session_to_string(0xabc),
            count: 3,
        });
        let bytes = m.to_frame().encode();
        let payload = br#"{"session":"00000000000000000000000000000abc","count":3}"#;
        assert_eq!(&bytes[..4], &(1 + payload.len() as u32).to_le_bytes());
        assert_eq!(bytes[4], 2);
        assert_eq!(&bytes[5..], payload);
        let (f, used) = Frame::decode(&bytes).unwrap().unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(Message::from_frame(&f).unwrap(), m);
        assert!(Frame::decode(&bytes[..bytes.len() - 1]).unwrap().is_none());
    }

    #[test]
    fn rejects_bad_frames() {
        assert!(matches!(Frame::decode(&[0, 0, 0, 0, 1]), Err(WireError::EmptyFrame)));
        assert!(matches!(Frame::decode(&[1, 0, 0, 0, 9]), Err(WireError::UnknownType(9))));
        let huge = ((MAX_PAYLOAD + 2) as u32).to_le_bytes();
        assert!(matches!(Frame::decode(&huge), Err(WireError::Oversized(_))));
        let mut r = io::Cursor::new(huge.to_vec());
        assert!(matches!(Frame::read_from(&mut r), Err(WireError::Oversized(_))));
        let mut r = io::Cursor::new(vec![3, 0]);
        assert!(matches!(Frame::read_from(&mut r), Err(WireError::Io(_))));
        let mut r = io::Cursor::new(Vec::new());
        assert!(Frame::read_from(&mut r).unwrap().is_none());
        let f = Frame {
            msg_type: MsgType::Query,
            payload: br#"{"user":"a","type":"count","where":"x=1","extra":1}"#.to_vec(),
        };
        assert!(matches!(Message::from_frame(&f), Err(WireError::Json(_))));
    }

    #[test]
    fn field_codecs() {
        let e = base_pow(Scalar::from_u64(5));
        let rows = vec![vec![e, e], vec![]];
        assert_eq!(decode_rows("gtoken1", &encode_rows(&rows)).unwrap(), rows);
        assert!(decode_rows("gtoken1", &[vec![encode_b64(&[0xff; 32])]]).is_err());
        assert!(decode_stag(&encode_b64(&[1; 7])).is_err());
        assert_eq!(decode_stag(&encode_b64(&[1; 16])).unwrap().as_bytes(), &[1; 16]);
        assert_eq!(session_from_str(&session_to_string(u128::MAX)).unwrap(), u128::MAX);
        assert!(session_from_str("xyz").is_err());
        assert!(decode_ciphertexts(&[encode_b64(&[0; 35])]).is_err());
    }

    #[test]
    fn json_field_names() {
        let q = Message::Query(QueryRequest {
            user: "ana".into(),
            query_type: "count".into(),
            where_expr: "phenotype=Cancer B".into(),
            kprime: None,
        });
        let text = String::from_utf8(q.to_frame().payload).unwrap();
        assert_eq!(text, r#"{"user":"ana","type":"count","where":"phenotype=Cancer B"}"#);
        let d = Message::Denied(Denied {
            reason: DenyReason::Auth,
            detail: String::new(),
        });
        assert_eq!(d.to_frame().payload, br#"{"reason":"auth","detail":""}"#);
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        let s = "[ -~]{0,20}";
        prop_oneof![
            (s, any::<u8>(), proptest::option::of(any::<u32>()))
                .prop_map(|(stag, gamma, k_prime)| Message::SearchInit(SearchInit { stag, gamma, k_prime })),
            (any::<u128>(), any::<u64>()).prop_map(|(id, count)| Message::SternCount(SternCount {
                session: session_to_string(id),
                count
            })),
            (s, proptest::collection::vec(proptest::collection::vec(s, 0..3), 0..3), any::<bool>())
                .prop_map(|(session, rows, last)| Message::XTokens(XTokens {
                    session,
                    first: 1,
                    gtoken1: rows.clone(),
                    gtoken2: rows,
                    last
                })),
            (s, s, s, proptest::option::of(0usize..10)).prop_map(|(user, t, w, kprime)| {
                Message::Query(QueryRequest { user, query_type: t, where_expr: w, kprime })
            }),
            (proptest::option::of(any::<u64>()), proptest::option::of(proptest::collection::vec(any::<u64>(), 0..4)))
                .prop_map(|(count, ids)| Message::Answer(QueryAnswer {
                    query_type: "match".into(),
                    count,
                    ids
                })),
            s.prop_map(|detail| Message::Error(ErrorReply::new(ErrorCode::Unavailable, detail))),
        ]
    }

    proptest! {
        #[test]
        fn frame_round_trip(m in arb_message()) {
            let bytes = m.to_frame().encode();
            let (f, used) = Frame::decode(&bytes).unwrap().unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(f.encode(), bytes.clone());
            prop_assert_eq!(Message::from_frame(&f).unwrap(), m);
            let mut r = io::Cursor::new(bytes);
            prop_assert_eq!(Frame::read_from(&mut r).unwrap().unwrap(), f);
        }

        #[test]
        fn garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            if let Ok(Some((f, _))) = Frame::decode(&bytes) {
                let _ = Message::from_frame(&f);
            }
            let _ = Message::read_from(&mut io::Cursor::new(bytes));
        }
    }
}
