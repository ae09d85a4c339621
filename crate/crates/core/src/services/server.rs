//! Data-server daemon: hosts the EGDB and answers searches.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::crypto::{GroupElement, PrfOutput};
use crate::index::{tset_retrieve, Egdb, TSetTuple};
use crate::query::{evaluate, GToK, Gamma, ResultSet};

use super::wire::{
    decode_rows, decode_stag, encode_ciphertexts, session_from_str, session_to_string, ErrorCode,
    ErrorReply, Message, SearchInit, SearchResult, SternCount, WireError, XTokens,
};

#[derive(Clone, Debug)]
pub struct ServerConfig {
    /// Sessions untouched for this long are dropped.
    pub idle_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            idle_timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionState {
    AwaitingTokens,
    Done,
}

struct Session {
    state: SessionState,
    stag: PrfOutput,
    tuples: Vec<TSetTuple>,
    gamma: Gamma,
    k_prime: Option<u32>,
    gtoken1: Vec<Vec<GroupElement>>,
    gtoken2: Vec<Vec<GroupElement>>,
    received: u64,
    last_seen: Instant,
}

pub struct DataServer {
    egdb: Egdb,
    sessions: Mutex<HashMap<u128, Session>>,
    config: ServerConfig,
}

fn malformed(e: impl ToString) -> ErrorReply {
    ErrorReply::new(ErrorCode::Malformed, e.to_string())
}

impl DataServer {
    pub fn new(egdb: Egdb, config: ServerConfig) -> Self {
        DataServer {
            egdb,
            sessions: Mutex::new(HashMap::new()),
            config,
        }
    }

    pub fn egdb(&self) -> &Egdb {
        &self.egdb
    }

    /// Number of live sessions.
    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    /// Serves one connection until the peer closes it or sends a bad frame.
    pub fn handle_connection(&self, stream: TcpStream) {
        let peer = stream.peer_addr().ok();
        if let Err(e) = stream.set_read_timeout(Some(self.config.idle_timeout)) {
            log::warn!("cannot set read timeout: {e}");
        }
        let Ok(write_half) = stream.try_clone() else {
            return;
        };
        self.serve_stream(BufReader::new(stream), BufWriter::new(write_half));
        log::debug!("connection from {peer:?} closed");
    }

    /// Request loop over any byte stream.
    pub fn serve_stream<R: Read, W: Write>(&self, mut reader: R, mut writer: W) {
        loop {
            let reply = match Message::read_from(&mut reader) {
                Ok(None) => return,
                Ok(Some(msg)) => match self.handle_message(msg) {
                    Ok(None) => continue,
                    Ok(Some(reply)) => reply,
                    Err(e) => {
                        log::warn!("request failed: {}", e.detail);
                        let _ = Message::Error(e).write_to(&mut writer);
                        return;
                    }
                },
                Err(WireError::Oversized(n)) => {
                    log::warn!("closing connection after oversized frame ({n} bytes)");
                    return;
                }
                Err(WireError::Io(e)) => {
                    log::debug!("connection ended: {e}");
                    return;
                }
                Err(e) => {
                    log::warn!("malformed frame: {e}");
                    let _ = Message::Error(malformed(e)).write_to(&mut writer);
                    return;
                }
            };
            if let Err(e) = reply.write_to(&mut writer) {
                log::debug!("reply failed: {e}");
                return;
            }
        }
    }

    /// Processes one message; `Ok(None)` when no reply is due.
    pub fn handle_message(&self, msg: Message) -> Result<Option<Message>, ErrorReply> {
        match msg {
            Message::SearchInit(init) => self.search_init(init).map(Some),
            Message::XTokens(batch) => self.xtokens(batch),
            other => Err(malformed(format!(
                "{} is not a data-server request",
                other.msg_type().name()
            ))),
        }
    }

    fn expire(&self, sessions: &mut HashMap<u128, Session>) {
        let timeout = self.config.idle_timeout;
        sessions.retain(|id, s| {
            let live = s.last_seen.elapsed() < timeout;
            if !live {
                log::info!("session {} expired", session_to_string(*id));
            }
            live
        });
    }

    fn search_init(&self, init: SearchInit) -> Result<Message, ErrorReply> {
        let stag = decode_stag(&init.stag).map_err(malformed)?;
        let gamma = Gamma::from_u8(init.gamma)
            .ok_or_else(|| malformed(format!("unknown gamma {}", init.gamma)))?;
        if (gamma == Gamma::Match) != init.k_prime.is_some() {
            return Err(malformed("k_prime must be given exactly for match searches"));
        }
        let tuples = tset_retrieve(&self.egdb.inv_g, &stag)
            .map_err(|e| ErrorReply::new(ErrorCode::Internal, e.to_string()))?;
        let count = tuples.len() as u64;

        let mut sessions = self.sessions.lock().unwrap_or_else(|p| p.into_inner());
        self.expire(&mut sessions);
        let mut id: u128 = rand::random();
        while sessions.contains_key(&id) {
            id = rand::random();
        }
        sessions.insert(
            id,
            Session {
                state: SessionState::AwaitingTokens,
                stag,
                tuples,
                gamma,
                k_prime: init.k_prime,
                gtoken1: Vec::new(),
                gtoken2: Vec::new(),
                received: 0,
                last_seen: Instant::now(),
            },
        );
        Ok(Message::SternCount(SternCount {
            session: session_to_string(id),
            count,
        }))
    }

    fn xtokens(&self, batch: XTokens) -> Result<Option<Message>, ErrorReply> {
        let id = session_from_str(&batch.session).map_err(malformed)?;
        let gtoken1 = decode_rows("gtoken1", &batch.gtoken1).map_err(malformed)?;
        let gtoken2 = decode_rows("gtoken2", &batch.gtoken2).map_err(malformed)?;

        let mut sessions = self.sessions.lock().unwrap_or_else(|p| p.into_inner());
        self.expire(&mut sessions);
        let session = sessions
            .get_mut(&id)
            .ok_or_else(|| ErrorReply::new(ErrorCode::Session, "unknown or expired session"))?;
        if session.state != SessionState::AwaitingTokens {
            return Err(ErrorReply::new(ErrorCode::Session, "session already answered"));
        }
        if batch.first != session.received + 1 {
            return Err(malformed(format!(
                "expected counter {}, got {}",
                session.received + 1,
                batch.first
            )));
        }
        let expect_g2 = if session.gamma == Gamma::Match { 0 } else { gtoken1.len() };
        if gtoken2.len() != expect_g2 {
            return Err(malformed("gtoken2 does not match gtoken1"));
        }
        session.received += gtoken1.len() as u64;
        session.last_seen = Instant::now();
        // Rows past the sterm's tuple count can never be used.
        let room = session.tuples.len().saturating_sub(session.gtoken1.len());
        session.gtoken1.extend(gtoken1.into_iter().take(room));
        session.gtoken2.extend(gtoken2.into_iter().take(room));
        if !batch.last {
            return Ok(None);
        }

        session.state = SessionState::Done;
        let session = sessions.remove(&id).expect("session present");
        drop(sessions);

        let tok = GToK {
            tau_rho: session.stag,
            gtoken1: session.gtoken1,
            gtoken2: session.gtoken2,
            gamma: session.gamma,
            k_prime: session.k_prime,
        };
        let result = evaluate(&tok, &session.tuples, &self.egdb.s_g).map_err(malformed)?;
        let (ids, count) = match result {
            ResultSet::Ids(ids) => (Some(encode_ciphertexts(&ids)), None),
            ResultSet::Count(n) => (None, Some(n)),
        };
        Ok(Some(Message::Result(SearchResult {
            session: batch.session,
            ids,
            count,
        })))
    }
}
