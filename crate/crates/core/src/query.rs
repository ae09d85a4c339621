//! Vetter-side request vetting and token generation, server-side search, and
//! vetter-side result decryption and output vetting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Mutex;

use thiserror::Error;

use crate::crypto::{
    base_pow, group_pow, prf_f, prf_fp, CryptoError, EncryptedId, GroupElement, IdSealer, KeySet,
    PrfOutput, Scalar,
};
use crate::encoding::{EncodedQuery, Keyword, Query, QueryType};
use crate::index::{tset_gettag, tset_retrieve, BloomFilter, Egdb, IndexError, TSetTuple};

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("malformed search token: {0}")]
    Protocol(String),
    #[error("result ciphertext {index} failed authentication")]
    Tampered { index: usize },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Query-type selector sent to the data server.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Gamma {
    /// Return matching encrypted IDs.
    Boolean = 1,
    /// Return the number of matches only.
    Count = 2,
    /// Return encrypted IDs matching at least k' xterms.
    Match = 3,
}

impl Gamma {
    pub fn for_query(t: QueryType) -> Self {
        match t {
            QueryType::Boolean => Gamma::Boolean,
            QueryType::Count => Gamma::Count,
            QueryType::Match => Gamma::Match,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Gamma::Boolean),
            2 => Some(Gamma::Count),
            3 => Some(Gamma::Match),
            _ => None,
        }
    }
}

/// Search token: sterm tag, per-counter xtokens, query type and threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GToK {
    pub tau_rho: PrfOutput,
    /// `gtoken1[c-1]`: tokens of non-negated xterms (all xterms for `Match`).
    pub gtoken1: Vec<Vec<GroupElement>>,
    /// `gtoken2[c-1]`: tokens of negated xterms; empty for `Match`.
    pub gtoken2: Vec<Vec<GroupElement>>,
    pub gamma: Gamma,
    pub k_prime: Option<u32>,
}

/// What the server can observe about a token's structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenShape {
    pub counters: usize,
    pub non_negated: usize,
    pub negated: usize,
    pub k_prime: Option<u32>,
}

impl GToK {
    pub fn counters(&self) -> usize {
        self.gtoken1.len()
    }

    pub fn validate(&self) -> Result<TokenShape, QueryError> {
        let bad = |m: &str| Err(QueryError::Protocol(m.to_string()));
        let width = |lists: &[Vec<GroupElement>]| -> Result<usize, QueryError> {
            let w = lists.first().map_or(0, Vec::len);
            if lists.iter().any(|l| l.len() != w) {
                return Err(QueryError::Protocol("per-counter token counts differ".into()));
            }
            Ok(w)
        };
        let non_negated = width(&self.gtoken1)?;
        let negated = width(&self.gtoken2)?;
        match self.gamma {
            Gamma::Match => {
                if !self.gtoken2.is_empty() {
                    return bad("match tokens carry no negated terms");
                }
                if self.k_prime.is_none() {
                    return bad("match tokens require k'");
                }
            }
            Gamma::Boolean | Gamma::Count => {
                if self.gtoken2.len() != self.gtoken1.len() {
                    return bad("gtoken1 and gtoken2 cover different counters");
                }
                if self.k_prime.is_some() {
                    return bad("k' is only valid for match tokens");
                }
            }
        }
        Ok(TokenShape {
            counters: self.counters(),
            non_negated,
            negated,
            k_prime: self.k_prime,
        })
    }
}

/// Generates the search token for an encoded query.
///
/// `inv_len` is the sterm's tuple count reported by the server; one token row
/// is produced per counter 1..=inv_len.
pub fn tok_gen(eq: &EncodedQuery, keys: &KeySet, inv_len: usize) -> GToK {
    let gamma = Gamma::for_query(eq.query_type);
    let (gtoken1, gtoken2) = tok_gen_rows(eq, keys, 1, inv_len);
    GToK {
        tau_rho: tset_gettag(&keys.k_t, &eq.sterm),
        gtoken1,
        gtoken2,
        gamma,
        k_prime: eq.k_prime.map(|k| k as u32),
    }
}

/// Token rows for counters `first..first + rows`, as (gtoken1, gtoken2).
/// gtoken2 is empty for match queries.
pub fn tok_gen_rows(
    eq: &EncodedQuery,
    keys: &KeySet,
    first: u64,
    rows: usize,
) -> (Vec<Vec<GroupElement>>, Vec<Vec<GroupElement>>) {
    let is_match = eq.query_type == QueryType::Match;
    let xkeys: Vec<(Scalar, bool)> = eq
        .xterms
        .iter()
        .map(|(g, negated)| (prf_fp(&keys.k_x, &g.encode()), *negated && !is_match))
        .collect();

    let mut gtoken1 = Vec::with_capacity(rows);
    let mut gtoken2 = Vec::with_capacity(if is_match { 0 } else { rows });
    for c in first..first + rows as u64 {
        let z = prf_fp(&keys.k_z, &eq.sterm.encode_with_counter(c));
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (xkey, negated) in &xkeys {
            let token = base_pow(z * *xkey);
            if *negated {
                neg.push(token);
            } else {
                pos.push(token);
            }
        }
        gtoken1.push(pos);
        if !is_match {
            gtoken2.push(neg);
        }
    }
    (gtoken1, gtoken2)
}

/// Search output: encrypted IDs (Boolean, Match) or a count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ResultSet {
    Ids(Vec<EncryptedId>),
    Count(u64),
}

fn in_xset(xset: &BloomFilter, token: &GroupElement, y: Scalar) -> Result<bool, QueryError> {
    let xtag = group_pow(token, y).map_err(|e| QueryError::Protocol(e.to_string()))?;
    Ok(xset.contains(xtag.as_bytes()))
}

/// Evaluates a token against already-retrieved sterm tuples.
pub fn evaluate(
    tok: &GToK,
    tuples: &[TSetTuple],
    xset: &BloomFilter,
) -> Result<ResultSet, QueryError> {
    tok.validate()?;
    if tok.counters() < tuples.len() {
        log::warn!(
            "token covers {} of {} sterm tuples; the rest are excluded",
            tok.counters(),
            tuples.len()
        );
    }
    let mut rset = Vec::new();
    for (c, tuple) in tuples.iter().enumerate().take(tok.counters()) {
        let keep = match tok.gamma {
            Gamma::Boolean | Gamma::Count => {
                let mut keep = true;
                for t in &tok.gtoken1[c] {
                    keep &= in_xset(xset, t, tuple.y)?;
                }
                for t in &tok.gtoken2[c] {
                    keep &= !in_xset(xset, t, tuple.y)?;
                }
                keep
            }
            Gamma::Match => {
                let mut j = 0u32;
                for t in &tok.gtoken1[c] {
                    if in_xset(xset, t, tuple.y)? {
                        j += 1;
                    }
                }
                j >= tok.k_prime.unwrap_or(u32::MAX)
            }
        };
        if keep {
            rset.push(tuple.id_ct);
        }
    }
    Ok(match tok.gamma {
        Gamma::Count => ResultSet::Count(rset.len() as u64),
        Gamma::Boolean | Gamma::Match => ResultSet::Ids(rset),
    })
}

/// Server-side search: TSet retrieval for the sterm, then xtag checks.
pub fn search(tok: &GToK, egdb: &Egdb) -> Result<ResultSet, QueryError> {
    let tuples = tset_retrieve(&egdb.inv_g, &tok.tau_rho)?;
    evaluate(tok, &tuples, &egdb.s_g)
}

/// Decrypts a result set produced for sterm `g1`.
pub fn retrieve_ids(
    rset: &[EncryptedId],
    g1: &Keyword,
    keys: &KeySet,
) -> Result<BTreeSet<u64>, QueryError> {
    let sealer = IdSealer::new(&prf_f(&keys.k_s, &g1.encode()))?;
    rset.iter()
        .enumerate()
        .map(|(index, ct)| sealer.open(ct).map_err(|_| QueryError::Tampered { index }))
        .collect()
}

/// Releases an ID result to a clinician, ascending.
pub fn out_v1(ids: &BTreeSet<u64>) -> Vec<u64> {
    ids.iter().copied().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputDecision {
    Release(u64),
    Reject { threshold: u64 },
}

/// Releases a count only if it reaches the policy threshold.
pub fn out_v2(count: u64, policy: &Policy) -> OutputDecision {
    if count >= policy.threshold {
        OutputDecision::Release(count)
    } else {
        OutputDecision::Reject {
            threshold: policy.threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Analyst,
    Clinician,
}

impl Role {
    pub fn permits(self, t: QueryType) -> bool {
        match self {
            Role::Analyst => t == QueryType::Count,
            Role::Clinician => true,
        }
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "analyst" => Ok(Role::Analyst),
            "clinician" => Ok(Role::Clinician),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Analyst => "analyst",
            Role::Clinician => "clinician",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("policy line {line}: {msg}")]
pub struct PolicyError {
    pub line: usize,
    pub msg: String,
}

/// Who may run which queries, and the minimum releasable count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Policy {
    pub roles: BTreeMap<String, Role>,
    pub threshold: u64,
}

impl Default for Policy {
    fn default() -> Self {
        Policy {
            roles: BTreeMap::new(),
            threshold: 1,
        }
    }
}

impl Policy {
    /// Parses `user <name> role <analyst|clinician>` and `threshold <T>` lines.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        let mut policy = Policy::default();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| PolicyError { line: i + 1, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let words: Vec<&str> = line.split_whitespace().collect();
            match words.as_slice() {
                ["user", name, "role", role] => {
                    let role = role.parse().map_err(err)?;
                    policy.roles.insert(name.to_string(), role);
                }
                ["threshold", t] => {
                    policy.threshold = t
                        .parse()
                        .ok()
                        .filter(|&t| t > 0)
                        .ok_or_else(|| err(format!("invalid threshold {t:?}")))?;
                }
                _ => return Err(err(format!("unrecognized line {line:?}"))),
            }
        }
        Ok(policy)
    }

    pub fn role_of(&self, user: &str) -> Option<Role> {
        self.roles.get(user).copied()
    }
}

/// Request vetting: does `user`'s role permit this query type?
pub fn req_v(user: &str, q: &Query, policy: &Policy) -> bool {
    match policy.role_of(user) {
        Some(role) => role.permits(q.query_type),
        None => {
            log::warn!("rejecting query from unknown user {user:?}");
            false
        }
    }
}

/// Append-only log of vetted requests, one line each.
pub struct AuditLog {
    sink: Mutex<Box<dyn Write + Send>>,
}

impl AuditLog {
    pub fn new(sink: Box<dyn Write + Send>) -> Self {
        AuditLog {
            sink: Mutex::new(sink),
        }
    }

    pub fn record(&self, user: &str, query_type: &str, outcome: &str) {
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let mut sink = self.sink.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = writeln!(sink, "{ts} user={user:?} type={query_type} outcome={outcome}")
            .and_then(|_| sink.flush())
        {
            log::error!("audit log write failed: {e}");
        }
    }
}

/// A decrypted query answer before output vetting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Answer {
    Count(u64),
    Ids(Vec<u64>),
}

/// Runs token generation, search and decryption in one process.
pub fn run_local(eq: &EncodedQuery, keys: &KeySet, egdb: &Egdb) -> Result<Answer, QueryError> {
    let inv_len = tset_retrieve(&egdb.inv_g, &tset_gettag(&keys.k_t, &eq.sterm))?.len();
    let tok = tok_gen(eq, keys, inv_len);
    match search(&tok, egdb)? {
        ResultSet::Count(n) => Ok(Answer::Count(n)),
        ResultSet::Ids(rset) => Ok(Answer::Ids(out_v1(&retrieve_ids(&rset, &eq.sterm, keys)?))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;
    use crate::encoding::{ge_encode, parse_gdb, parse_query, q_encode, FrequencyHint};
    use crate::fixtures::SAMPLE_CSV;
    use crate::index::{b_inv, egdb_setup, DEFAULT_FP_RATE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn fixture() -> (KeySet, Egdb) {
        let gdb = parse_gdb(SAMPLE_CSV.as_bytes()).unwrap();
        let iinx = b_inv(&ge_encode(&gdb), &gdb);
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let keys = keygen(128, &mut rng).unwrap();
        let egdb = egdb_setup(&keys, &iinx, DEFAULT_FP_RATE, &mut rng).unwrap();
        (keys, egdb)
    }

    fn encode(text: &str, t: QueryType, k: Option<usize>) -> EncodedQuery {
        q_encode(&parse_query(text, t, k, "u").unwrap(), &FrequencyHint::new()).unwrap()
    }

    fn inv_len(keys: &KeySet, egdb: &Egdb, g: &Keyword) -> usize {
        tset_retrieve(&egdb.inv_g, &tset_gettag(&keys.k_t, g)).unwrap().len()
    }

    fn policy() -> Policy {
        Policy::parse("user ana role analyst\nuser doc role clinician\nthreshold 1\n").unwrap()
    }

    #[test]
    fn req_v_roles() {
        let p = policy();
        let count = parse_query("phenotype=Cancer B", QueryType::Count, None, "ana").unwrap();
        let boolean = parse_query("phenotype=Cancer B", QueryType::Boolean, None, "ana").unwrap();
        assert!(req_v("ana", &count, &p));
        assert!(!req_v("ana", &boolean, &p));
        assert!(req_v("doc", &boolean, &p));
        assert!(!req_v("mallory", &count, &p));
    }

    #[test]
    fn policy_parse_errors() {
        assert_eq!(Policy::parse("").unwrap().threshold, 1);
        assert_eq!(Policy::parse("threshold 5 # min cell").unwrap().threshold, 5);
        assert_eq!(Policy::parse("user a role boss").unwrap_err().line, 1);
        assert_eq!(Policy::parse("\nthreshold 0").unwrap_err().line, 2);
        assert!(Policy::parse("grant everything").is_err());
    }

    #[test]
    fn tok_gen_shapes() {
        let (keys, egdb) = fixture();
        let eq = encode("phenotype=Cancer B,SNP2=CC,SNP4=AG", QueryType::Count, None);
        let n = inv_len(&keys, &egdb, &eq.sterm);
        assert_eq!(n, 3);
        let tok = tok_gen(&eq, &keys, n);
        assert_eq!(tok.gamma, Gamma::Count);
        let shape = tok.validate().unwrap();
        assert_eq!((shape.counters, shape.non_negated, shape.negated), (3, 2, 0));

        let neg = encode("phenotype=Cancer B,SNP2!=CC,SNP4=AG", QueryType::Count, None);
        let shape = tok_gen(&neg, &keys, n).validate().unwrap();
        assert_eq!((shape.non_negated, shape.negated), (1, 1));

        let only = encode("phenotype=Cancer B", QueryType::Boolean, None);
        let tok = tok_gen(&only, &keys, n);
        assert!(tok.gtoken1.iter().all(Vec::is_empty));
        assert_eq!(tok.gamma.as_u8(), 1);

        let full = tok_gen(&eq, &keys, n);
        let (g1, g2) = tok_gen_rows(&eq, &keys, 2, 2);
        assert_eq!(g1, full.gtoken1[1..].to_vec());
        assert_eq!(g2, full.gtoken2[1..].to_vec());

        let degenerate = tok_gen(&eq, &keys, 0);
        assert_eq!(degenerate.counters(), 0);
        assert_eq!(degenerate.tau_rho, tset_gettag(&keys.k_t, &eq.sterm));
    }

    #[test]
    fn count_queries_on_sample() {
        let (keys, egdb) = fixture();
        let q = encode("phenotype=Cancer B,SNP2=CC,SNP4=AG", QueryType::Count, None);
        assert_eq!(run_local(&q, &keys, &egdb).unwrap(), Answer::Count(2));
        let q = encode("phenotype=Cancer B,SNP2!=CC,SNP4=AG", QueryType::Count, None);
        assert_eq!(run_local(&q, &keys, &egdb).unwrap(), Answer::Count(1));
    }

    #[test]
    fn boolean_and_match_on_sample() {
        let (keys, egdb) = fixture();
        let q = encode("phenotype=Cancer B", QueryType::Boolean, None);
        assert_eq!(run_local(&q, &keys, &egdb).unwrap(), Answer::Ids(vec![2, 5, 7]));
        let q = encode("phenotype=Cancer B,SNP2=CC,SNP3=CT,SNP4=AG", QueryType::Match, Some(2));
        assert_eq!(run_local(&q, &keys, &egdb).unwrap(), Answer::Ids(vec![2, 5, 7]));
        let q = encode("id=7,SNP2=CC,SNP3=CT,SNP4=AG", QueryType::Match, Some(2));
        assert_eq!(run_local(&q, &keys, &egdb).unwrap(), Answer::Ids(vec![7]));
        let q = encode("id=7,SNP2=CC,SNP3=CT,SNP4=AG", QueryType::Match, Some(3));
        assert_eq!(run_local(&q, &keys, &egdb).unwrap(), Answer::Ids(vec![]));
        let q = encode("phenotype=Cancer B,SNP2=CC|SNP4=AG", QueryType::Boolean, None);
        assert_eq!(run_local(&q, &keys, &egdb).unwrap(), Answer::Ids(vec![2, 5, 7]));
    }

    #[test]
    fn unknown_sterm_gives_empty_result() {
        let (keys, egdb) = fixture();
        let q = encode("phenotype=Cancer Z,SNP2=CC", QueryType::Boolean, None);
        assert_eq!(run_local(&q, &keys, &egdb).unwrap(), Answer::Ids(vec![]));
        let tok = tok_gen(&q, &keys, 5);
        assert_eq!(search(&tok, &egdb).unwrap(), ResultSet::Ids(vec![]));
    }

    #[test]
    fn short_token_excludes_uncovered_tuples() {
        let (keys, egdb) = fixture();
        let q = encode("phenotype=Cancer B", QueryType::Count, None);
        assert_eq!(search(&tok_gen(&q, &keys, 2), &egdb).unwrap(), ResultSet::Count(2));
        assert_eq!(search(&tok_gen(&q, &keys, 9), &egdb).unwrap(), ResultSet::Count(3));
    }

    #[test]
    fn malformed_tokens_are_rejected() {
        let (keys, egdb) = fixture();
        let q = encode("phenotype=Cancer B,SNP2=CC,SNP4=AG", QueryType::Count, None);
        let mut tok = tok_gen(&q, &keys, 3);
        tok.gtoken1[1].pop();
        assert!(matches!(search(&tok, &egdb), Err(QueryError::Protocol(_))));
        let mut tok = tok_gen(&q, &keys, 3);
        tok.gamma = Gamma::Match;
        assert!(matches!(search(&tok, &egdb), Err(QueryError::Protocol(_))));
    }

    #[test]
    fn retrieve_ids_detects_tampering() {
        let (keys, egdb) = fixture();
        let q = encode("phenotype=Cancer B", QueryType::Boolean, None);
        let tok = tok_gen(&q, &keys, 3);
        let ResultSet::Ids(mut rset) = search(&tok, &egdb).unwrap() else { panic!() };
        assert_eq!(retrieve_ids(&rset, &q.sterm, &keys).unwrap(), BTreeSet::from([2, 5, 7]));
        assert!(retrieve_ids(&[], &q.sterm, &keys).unwrap().is_empty());
        let mut bytes = *rset[1].as_bytes();
        bytes[15] ^= 0x01;
        rset[1] = EncryptedId::from_bytes(&bytes).unwrap();
        assert!(matches!(
            retrieve_ids(&rset, &q.sterm, &keys),
            Err(QueryError::Tampered { index: 1 })
        ));
    }

    #[test]
    fn output_vetting() {
        assert_eq!(out_v1(&BTreeSet::from([7, 2, 5])), vec![2, 5, 7]);
        assert!(out_v1(&BTreeSet::new()).is_empty());
        let p1 = Policy { threshold: 1, ..Policy::default() };
        let p3 = Policy { threshold: 3, ..Policy::default() };
        assert_eq!(out_v2(2, &p1), OutputDecision::Release(2));
        assert_eq!(out_v2(2, &p3), OutputDecision::Reject { threshold: 3 });
        assert_eq!(out_v2(0, &p1), OutputDecision::Reject { threshold: 1 });
    }

    #[test]
    fn audit_log_writes_one_line_per_request() {
        #[derive(Clone, Default)]
        struct Shared(std::sync::Arc<Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(b);
                Ok(b.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let buf = Shared::default();
        let log = AuditLog::new(Box::new(buf.clone()));
        log.record("ana", "count", "answered");
        log.record("eve", "boolean", "denied:auth");
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("outcome=denied:auth"));
    }
}
