#![allow(dead_code)]

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use privgendb_core::crypto::{keygen, GroupElement, KeySet};
use privgendb_core::encoding::{ge_encode, parse_gdb, Gdb, Keyword};
use privgendb_core::fixtures::SAMPLE_CSV;
use privgendb_core::index::{b_inv, egdb_setup, Egdb, DEFAULT_FP_RATE};
use privgendb_core::query::{AuditLog, Policy};
use privgendb_core::services::wire::{Frame, Message, QueryAnswer, QueryRequest};
use privgendb_core::services::{
    serve_data, serve_vetter, submit_query, DataServer, Reply, ServerConfig, ServiceHandle,
    Vetter, VetterConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const POLICY: &str = "user ana role analyst\nuser doc role clinician\nthreshold 1\n";

pub fn sample() -> Gdb {
    parse_gdb(SAMPLE_CSV.as_bytes()).unwrap()
}

pub fn encrypt(gdb: &Gdb, seed: u64) -> (KeySet, Egdb) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let keys = keygen(128, &mut rng).unwrap();
    let iinx = b_inv(&ge_encode(gdb), gdb);
    let egdb = egdb_setup(&keys, &iinx, DEFAULT_FP_RATE, &mut rng).unwrap();
    (keys, egdb)
}

/// A data server and a vetter wired together, optionally through a proxy.
pub struct Deployment {
    pub server: Arc<DataServer>,
    pub server_handle: ServiceHandle,
    pub vetter_handle: ServiceHandle,
    pub proxy: Option<RecordingProxy>,
    pub keys: KeySet,
}

impl Deployment {
    pub fn start(gdb: &Gdb, policy: &str, proxied: bool) -> Self {
        let (keys, egdb) = encrypt(gdb, 11);
        let server = Arc::new(DataServer::new(egdb, ServerConfig::default()));
        let server_handle = serve_data(server.clone(), "127.0.0.1:0").unwrap();
        let proxy = proxied.then(|| RecordingProxy::start(server_handle.local_addr()));
        let upstream = proxy
            .as_ref()
            .map_or(server_handle.local_addr(), RecordingProxy::addr);
        let vetter = Vetter::new(
            keys.clone(),
            Policy::parse(policy).unwrap(),
            AuditLog::new(Box::new(std::io::sink())),
            VetterConfig::new(upstream.to_string()),
        );
        let vetter_handle = serve_vetter(Arc::new(vetter), "127.0.0.1:0").unwrap();
        Deployment {
            server,
            server_handle,
            vetter_handle,
            proxy,
            keys,
        }
    }

    pub fn vetter_addr(&self) -> String {
        self.vetter_handle.local_addr().to_string()
    }

    pub fn ask(&self, user: &str, t: &str, expr: &str, kprime: Option<usize>) -> Reply {
        submit_query(
            &self.vetter_addr(),
            &QueryRequest {
                user: user.into(),
                query_type: t.into(),
                where_expr: expr.into(),
                kprime,
            },
            Duration::from_secs(60),
        )
        .unwrap()
    }
}

pub fn answer(reply: Reply) -> QueryAnswer {
    match reply {
        Reply::Answer(a) => a,
        other => panic!("expected an answer, got {other:?}"),
    }
}

/// Forwards TCP connections to `upstream` and records both directions.
pub struct RecordingProxy {
    addr: SocketAddr,
    pub to_server: Arc<Mutex<Vec<u8>>>,
    pub to_client: Arc<Mutex<Vec<u8>>>,
}

fn pump(mut from: TcpStream, mut to: TcpStream, log: Arc<Mutex<Vec<u8>>>) {
    let mut buf = [0u8; 16 * 1024];
    loop {
        match from.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                log.lock().unwrap().extend_from_slice(&buf[..n]);
                if to.write_all(&buf[..n]).is_err() {
                    break;
                }
            }
        }
    }
    let _ = to.shutdown(Shutdown::Write);
}

impl RecordingProxy {
    pub fn start(upstream: SocketAddr) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let to_server = Arc::new(Mutex::new(Vec::new()));
        let to_client = Arc::new(Mutex::new(Vec::new()));
        let (ts, tc) = (to_server.clone(), to_client.clone());
        thread::spawn(move || {
            for conn in listener.incoming() {
                let Ok(client) = conn else { continue };
                let Ok(server) = TcpStream::connect(upstream) else { continue };
                let (c2, s2) = (client.try_clone().unwrap(), server.try_clone().unwrap());
                let (ts, tc) = (ts.clone(), tc.clone());
                thread::spawn(move || pump(client, server, ts));
                thread::spawn(move || pump(s2, c2, tc));
            }
        });
        RecordingProxy {
            addr,
            to_server,
            to_client,
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn clear(&self) {
        self.to_server.lock().unwrap().clear();
        self.to_client.lock().unwrap().clear();
    }

    /// Waits until both directions stop growing, then returns their bytes.
    pub fn transcript(&self) -> (Vec<u8>, Vec<u8>) {
        let mut last = (usize::MAX, usize::MAX);
        loop {
            thread::sleep(Duration::from_millis(50));
            let now = (self.to_server.lock().unwrap().len(), self.to_client.lock().unwrap().len());
            if now == last {
                break;
            }
            last = now;
        }
        (self.to_server.lock().unwrap().clone(), self.to_client.lock().unwrap().clone())
    }
}

pub fn frames(mut bytes: &[u8]) -> Vec<Frame> {
    let mut out = Vec::new();
    while let Some((f, used)) = Frame::decode(bytes).expect("well-formed transcript") {
        out.push(f);
        bytes = &bytes[used..];
    }
    assert!(bytes.is_empty(), "transcript ends mid-frame");
    out
}

/// What a search session revealed to the data server.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct SessionView {
    pub gamma: u8,
    pub k_prime: Option<u32>,
    pub counters: usize,
    /// Distinct (|gtoken1[c]|, |gtoken2[c]|) pairs seen.
    pub np: BTreeSet<(usize, usize)>,
}

const ALLOWED_KEYS: [&str; 10] = [
    "stag", "gamma", "k_prime", "session", "count", "first", "gtoken1", "gtoken2", "last", "ids",
];

fn walk_json(v: &serde_json::Value, strings: &mut Vec<String>, numbers: &mut Vec<(String, u64)>, key: &str) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                assert!(ALLOWED_KEYS.contains(&k.as_str()), "unexpected field {k:?} on the server link");
                walk_json(v, strings, numbers, k);
            }
        }
        serde_json::Value::Array(items) => items.iter().for_each(|i| walk_json(i, strings, numbers, key)),
        serde_json::Value::String(s) => strings.push(s.clone()),
        serde_json::Value::Number(n) => numbers.push((key.to_string(), n.as_u64().expect("unsigned"))),
        serde_json::Value::Bool(_) => assert_eq!(key, "last"),
        serde_json::Value::Null => panic!("null in {key}"),
    }
}

/// Scans a vetter/server transcript for anything beyond tags, group elements,
/// ciphertexts and counts. Panics on a violation.
pub fn scan_server_transcript(
    to_server: &[u8],
    to_client: &[u8],
    gdb: &Gdb,
    keys: &KeySet,
) -> Vec<SessionView> {
    let raw: Vec<u8> = [to_server, to_client].concat();
    let contains = |hay: &[u8], needle: &[u8]| hay.windows(needle.len()).any(|w| w == needle);

    let mut forbidden_text: BTreeSet<String> = BTreeSet::new();
    for rec in &gdb.records {
        forbidden_text.insert(rec.phenotype.clone());
        for (_, v) in &rec.metadata {
            forbidden_text.insert(v.clone());
        }
    }
    for t in &forbidden_text {
        assert!(!contains(&raw, t.as_bytes()), "plaintext {t:?} on the wire");
    }
    for word in ["phenotype", "SNP_", "ID:"] {
        assert!(!contains(&raw, word.as_bytes()), "{word:?} on the wire");
    }
    let key_bytes: Vec<Vec<u8>> = [&keys.k_s, &keys.k_x, &keys.k_i, &keys.k_z, &keys.k_t]
        .iter()
        .map(|k| k.as_bytes().to_vec())
        .collect();
    for k in &key_bytes {
        assert!(!contains(&raw, k), "raw key bytes on the wire");
        assert!(!contains(&raw, B64.encode(k).trim_end_matches('=').as_bytes()), "encoded key on the wire");
    }
    let keyword_encodings: Vec<Vec<u8>> =
        ge_encode(gdb).iter().map(Keyword::encode).collect();

    let mut views: Vec<SessionView> = Vec::new();
    for f in frames(to_server).iter().chain(frames(to_client).iter()) {
        let msg = Message::from_frame(f).expect("valid message");
        let value: serde_json::Value = serde_json::from_slice(&f.payload).unwrap();
        let mut strings = Vec::new();
        let mut numbers = Vec::new();
        walk_json(&value, &mut strings, &mut numbers, "");
        for (field, _) in &numbers {
            assert!(
                ["gamma", "k_prime", "count", "first"].contains(&field.as_str()),
                "number in field {field:?}"
            );
        }
        for s in &strings {
            let is_session = s.len() == 32 && s.bytes().all(|b| b.is_ascii_hexdigit());
            if is_session {
                continue;
            }
            let blob = B64.decode(s).expect("non-session strings are base64");
            assert!(matches!(blob.len(), 16 | 32 | 36), "blob of {} bytes", blob.len());
            if blob.len() == 32 {
                GroupElement::from_bytes(&blob).expect("32-byte blobs are group elements");
            }
            for k in &key_bytes {
                assert!(!contains(&blob, k), "key bytes inside a blob");
            }
            for e in &keyword_encodings {
                assert!(!contains(&blob, e), "keyword encoding inside a blob");
            }
            for rec in &gdb.records {
                assert!(!contains(&blob, &rec.id.to_le_bytes()), "record ID inside a blob");
            }
        }
        match msg {
            Message::SearchInit(init) => views.push(SessionView {
                gamma: init.gamma,
                k_prime: init.k_prime,
                ..SessionView::default()
            }),
            Message::XTokens(x) => {
                let view = views.last_mut().expect("tokens follow an init");
                view.counters += x.gtoken1.len();
                for (c, row) in x.gtoken1.iter().enumerate() {
                    let neg = x.gtoken2.get(c).map_or(0, Vec::len);
                    view.np.insert((row.len(), neg));
                }
            }
            Message::SternCount(_) | Message::Result(_) | Message::Error(_) => {}
            other => panic!("{:?} on the server link", other.msg_type()),
        }
    }
    views
}
