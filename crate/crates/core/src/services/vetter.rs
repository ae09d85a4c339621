//! Vetter daemon: holds the keys, vets requests, runs the two-round search
//! against the data server and vets results before release.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

use crate::crypto::KeySet;
use crate::encoding::{parse_query, q_encode, EncodedQuery, FrequencyHint, QueryType};
use crate::index::tset_gettag;
use crate::query::{
    out_v1, out_v2, req_v, retrieve_ids, tok_gen_rows, AuditLog, Gamma, OutputDecision, Policy,
    QueryError, ResultSet,
};

use super::wire::{
    decode_ciphertexts, encode_b64, encode_rows, DenyReason, Denied, ErrorCode, ErrorReply,
    Message, QueryAnswer, QueryRequest, SearchInit, WireError, XTokens, XTOKEN_BATCH,
};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("data server unreachable: {0}")]
    Unavailable(std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("data server error: {0:?}")]
    Remote(ErrorReply),
    #[error(transparent)]
    Query(#[from] QueryError),
}

/// Runs the two-round search protocol over an open connection.
pub fn remote_search<S: Read + Write>(
    conn: &mut S,
    eq: &EncodedQuery,
    keys: &KeySet,
) -> Result<ResultSet, SearchError> {
    let gamma = Gamma::for_query(eq.query_type);
    Message::SearchInit(SearchInit {
        stag: encode_b64(tset_gettag(&keys.k_t, &eq.sterm).as_bytes()),
        gamma: gamma.as_u8(),
        k_prime: eq.k_prime.map(|k| k as u32),
    })
    .write_to(conn)?;
    let init = match expect_reply(conn)? {
        Message::SternCount(c) => c,
        other => return Err(WireError::Unexpected(other.msg_type().name()).into()),
    };

    let total = init.count as usize;
    let mut first = 1u64;
    loop {
        let rows = XTOKEN_BATCH.min(total + 1 - first as usize);
        let (g1, g2) = tok_gen_rows(eq, keys, first, rows);
        let last = first as usize + rows > total;
        Message::XTokens(XTokens {
            session: init.session.clone(),
            first,
            gtoken1: encode_rows(&g1),
            gtoken2: encode_rows(&g2),
            last,
        })
        .write_to(conn)?;
        if last {
            break;
        }
        first += rows as u64;
    }

    match expect_reply(conn)? {
        Message::Result(r) => match (gamma, r.ids, r.count) {
            (Gamma::Count, None, Some(n)) => Ok(ResultSet::Count(n)),
            (Gamma::Boolean | Gamma::Match, Some(ids), None) => {
                Ok(ResultSet::Ids(decode_ciphertexts(&ids)?))
            }
            _ => Err(WireError::Unexpected("RESULT shape").into()),
        },
        other => Err(WireError::Unexpected(other.msg_type().name()).into()),
    }
}

fn expect_reply<S: Read>(conn: &mut S) -> Result<Message, SearchError> {
    match Message::read_from(conn)? {
        Some(Message::Error(e)) => Err(SearchError::Remote(e)),
        Some(m) => Ok(m),
        None => Err(WireError::Io(std::io::ErrorKind::UnexpectedEof.into()).into()),
    }
}

#[derive(Clone, Debug)]
pub struct VetterConfig {
    pub server_addr: String,
    pub connect_timeout: Duration,
    pub io_timeout: Duration,
}

impl VetterConfig {
    pub fn new(server_addr: impl Into<String>) -> Self {
        VetterConfig {
            server_addr: server_addr.into(),
            connect_timeout: Duration::from_secs(5),
            io_timeout: Duration::from_secs(300),
        }
    }
}

pub struct Vetter {
    keys: KeySet,
    policy: Policy,
    hint: FrequencyHint,
    audit: AuditLog,
    config: VetterConfig,
}

impl Vetter {
    pub fn new(keys: KeySet, policy: Policy, audit: AuditLog, config: VetterConfig) -> Self {
        Vetter {
            keys,
            policy,
            hint: FrequencyHint::new(),
            audit,
            config,
        }
    }

    /// Keyword frequencies used to pick the sterm.
    pub fn with_frequency_hint(mut self, hint: FrequencyHint) -> Self {
        self.hint = hint;
        self
    }

    pub fn handle_connection(&self, stream: TcpStream) {
        if let Err(e) = stream.set_read_timeout(Some(self.config.io_timeout)) {
            log::warn!("cannot set read timeout: {e}");
        }
        let Ok(write_half) = stream.try_clone() else {
            return;
        };
        let mut reader = BufReader::new(stream);
        let mut writer = BufWriter::new(write_half);
        loop {
            let reply = match Message::read_from(&mut reader) {
                Ok(None) => return,
                Ok(Some(Message::Query(req))) => self.answer(&req),
                Ok(Some(other)) => Message::Error(ErrorReply::new(
                    ErrorCode::Malformed,
                    format!("{} is not a vetter request", other.msg_type().name()),
                )),
                Err(WireError::Io(_)) | Err(WireError::Oversized(_)) => return,
                Err(e) => {
                    let _ = Message::Error(ErrorReply::new(ErrorCode::Malformed, e.to_string()))
                        .write_to(&mut writer);
                    return;
                }
            };
            if reply.write_to(&mut writer).is_err() {
                return;
            }
        }
    }

    fn connect(&self) -> Result<TcpStream, SearchError> {
        let addrs: Vec<SocketAddr> = self
            .config
            .server_addr
            .to_socket_addrs()
            .map_err(SearchError::Unavailable)?
            .collect();
        let mut last = std::io::Error::new(std::io::ErrorKind::NotFound, "no address");
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, self.config.connect_timeout) {
                Ok(s) => {
                    s.set_read_timeout(Some(self.config.io_timeout))
                        .map_err(SearchError::Unavailable)?;
                    return Ok(s);
                }
                Err(e) => last = e,
            }
        }
        Err(SearchError::Unavailable(last))
    }

    /// Handles one user query end to end and returns the reply to send.
    pub fn answer(&self, req: &QueryRequest) -> Message {
        let type_name = req.query_type.to_ascii_lowercase();
        let reply = self.answer_inner(req);
        let outcome = match &reply {
            Message::Answer(_) => "answered".to_string(),
            Message::Denied(d) => format!("denied:{}", d.reason.as_str()),
            Message::Error(e) => format!("error:{}", e.code.as_str()),
            _ => "internal".to_string(),
        };
        self.audit.record(&req.user, &type_name, &outcome);
        reply
    }

    fn answer_inner(&self, req: &QueryRequest) -> Message {
        let deny = |reason, detail: String| Message::Denied(Denied { reason, detail });
        let requested = match req.query_type.parse::<QueryType>() {
            Ok(t) => t,
            Err(e) => return deny(DenyReason::Parse, e.to_string()),
        };
        let query = match parse_query(&req.where_expr, requested, req.kprime, &req.user) {
            Ok(q) => q,
            Err(e) => return deny(DenyReason::Parse, e.to_string()),
        };
        if !req_v(&req.user, &query, &self.policy) {
            return deny(
                DenyReason::Auth,
                format!("user {:?} may not run {} queries", req.user, query.query_type),
            );
        }
        let eq = match q_encode(&query, &self.hint) {
            Ok(eq) => eq,
            Err(e) => return deny(DenyReason::Parse, e.to_string()),
        };

        let result = self.connect().and_then(|mut conn| remote_search(&mut conn, &eq, &self.keys));
        let rset = match result {
            Ok(r) => r,
            Err(SearchError::Unavailable(e)) => {
                return Message::Error(ErrorReply::new(ErrorCode::Unavailable, e.to_string()))
            }
            Err(e) => {
                log::error!("search failed: {e}");
                return Message::Error(ErrorReply::new(ErrorCode::Internal, e.to_string()));
            }
        };

        let query_type = requested.to_string();
        match rset {
            ResultSet::Count(n) => match out_v2(n, &self.policy) {
                OutputDecision::Release(n) => Message::Answer(QueryAnswer {
                    query_type,
                    count: Some(n),
                    ids: None,
                }),
                OutputDecision::Reject { threshold } => deny(
                    DenyReason::Threshold,
                    format!("result is below the release threshold {threshold}"),
                ),
            },
            ResultSet::Ids(cts) => match retrieve_ids(&cts, &eq.sterm, &self.keys) {
                Ok(ids) => Message::Answer(QueryAnswer {
                    query_type,
                    count: None,
                    ids: Some(out_v1(&ids)),
                }),
                Err(e) => {
                    log::error!("result rejected: {e}");
                    Message::Error(ErrorReply::new(ErrorCode::Integrity, e.to_string()))
                }
            },
        }
    }
}
