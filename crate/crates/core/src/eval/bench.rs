//! Timing harness over a grid of synthetic databases.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{gen_synthetic, SpecError, SyntheticSpec};
use crate::crypto::{keygen, KeySet};
use crate::encoding::{ge_encode, q_encode, EncodedQuery, FrequencyHint, Gdb, Keyword, Predicate, Query, QueryType};
use crate::index::{b_inv, egdb_setup, tset_gettag, tset_retrieve, Egdb, DEFAULT_FP_RATE};
use crate::query::{search, tok_gen, Gamma, QueryError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Index(#[from] crate::index::IndexError),
    #[error(transparent)]
    Crypto(#[from] crate::crypto::CryptoError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn default_runs() -> usize {
    5
}
fn default_seed() -> u64 {
    1
}
fn default_fp() -> f64 {
    DEFAULT_FP_RATE
}
fn default_types() -> Vec<String> {
    vec!["count".into()]
}

/// Cartesian grid of benchmark points, read from TOML:
///
/// ```toml
/// runs = 5
/// r = [5000, 20000]
/// l = [20]
/// alpha = [100]
/// n = [10]
/// types = ["count", "boolean"]
/// ```
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchGrid {
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_fp")]
    pub p_fp: f64,
    pub r: Vec<usize>,
    pub l: Vec<usize>,
    pub alpha: Vec<usize>,
    pub n: Vec<usize>,
    #[serde(default = "default_types")]
    pub types: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchPoint {
    pub r: usize,
    pub l: usize,
    pub alpha: usize,
    pub n: usize,
    pub query_type: QueryType,
}

impl BenchGrid {
    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let grid: BenchGrid = toml::from_str(text)?;
        grid.points()?;
        Ok(grid)
    }

    pub fn points(&self) -> Result<Vec<BenchPoint>, BenchError> {
        let bad = |m: String| Err(BenchError::Grid(m));
        if self.runs < 5 {
            return bad(format!("runs = {} (at least 5 needed for a median)", self.runs));
        }
        if !(self.p_fp > 0.0 && self.p_fp < 1.0) {
            return bad(format!("p_fp = {} outside (0, 1)", self.p_fp));
        }
        let types = self
            .types
            .iter()
            .map(|t| t.parse::<QueryType>().map_err(|e| BenchError::Grid(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = Vec::new();
        for &r in &self.r {
            for &l in &self.l {
                for &alpha in &self.alpha {
                    for &n in &self.n {
                        for &query_type in &types {
                            if alpha == 0 || alpha > r {
                                return bad(format!("alpha = {alpha} must lie in 1..={r}"));
                            }
                            if n == 0 || n > l + 1 {
                                return bad(format!("n = {n} must lie in 1..={}", l + 1));
                            }
                            if query_type == QueryType::Match && n < 2 {
                                return bad("match queries need n >= 2".into());
                            }
                            out.push(BenchPoint { r, l, alpha, n, query_type });
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            return bad("empty grid".into());
        }
        Ok(out)
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub r: usize,
    pub l: usize,
    pub alpha: usize,
    pub n: usize,
    pub gamma: u8,
    pub build_ms: f64,
    pub tokgen_ms: f64,
    pub search_ms: f64,
    pub egdb_bytes: u64,
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// A database encrypted in memory.
pub struct BuiltDb {
    pub gdb: Gdb,
    pub keys: KeySet,
    pub egdb: Egdb,
    /// Index construction and encryption time.
    pub build_ms: f64,
}

pub fn build_db(gdb: Gdb, p_fp: f64, seed: u64) -> Result<BuiltDb, BenchError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let keys = keygen(128, &mut rng)?;
    let start = Instant::now();
    let iinx = b_inv(&ge_encode(&gdb), &gdb);
    let egdb = egdb_setup(&keys, &iinx, p_fp, &mut rng)?;
    let build_ms = ms(start);
    Ok(BuiltDb { gdb, keys, egdb, build_ms })
}

/// `phenotype = target` plus `n - 1` SNP predicates at distinct positions,
/// taken from one target record.
pub fn bench_query<R: Rng>(gdb: &Gdb, n: usize, query_type: QueryType, rng: &mut R) -> Query {
    let targets: Vec<_> = gdb.records.iter().filter(|r| r.phenotype == "target").collect();
    let rec = targets.choose(rng).expect("table has target records");
    let positions: BTreeSet<usize> = rand::seq::index::sample(rng, gdb.snp_count, n - 1)
        .into_iter()
        .collect();
    let mut predicates = vec![Predicate {
        keyword: Keyword::phenotype("target"),
        negated: false,
    }];
    predicates.extend(positions.into_iter().map(|i| Predicate {
        keyword: Keyword::snp(i as u32 + 1, rec.genotypes[i]),
        negated: false,
    }));
    let k_prime = (query_type == QueryType::Match).then(|| ((n - 1) / 2).max(1));
    Query::new(query_type, predicates, k_prime, "bench").expect("bench query is valid")
}

/// Median token-generation and search times over `runs` repetitions.
pub fn time_query(db: &BuiltDb, eq: &EncodedQuery, runs: usize) -> Result<(f64, f64), BenchError> {
    let inv_len = tset_retrieve(&db.egdb.inv_g, &tset_gettag(&db.keys.k_t, &eq.sterm))?.len();
    let mut tok_ms = Vec::with_capacity(runs);
    let mut search_ms = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        let tok = tok_gen(eq, &db.keys, inv_len);
        tok_ms.push(ms(start));
        let start = Instant::now();
        std::hint::black_box(search(&tok, &db.egdb)?);
        search_ms.push(ms(start));
    }
    Ok((median(&mut tok_ms), median(&mut search_ms)))
}

/// Runs every grid point. Each database is built `runs` times for the median
/// build time; `progress` is called after each report.
pub fn bench_run(
    grid: &BenchGrid,
    mut progress: impl FnMut(&BenchReport),
) -> Result<Vec<BenchReport>, BenchError> {
    let points = grid.points()?;
    let mut reports = Vec::with_capacity(points.len());
    let mut i = 0;
    while i < points.len() {
        let p = points[i];
        let same_db = points[i..]
            .iter()
            .take_while(|q| (q.r, q.l, q.alpha) == (p.r, p.l, p.alpha))
            .count();
        let gdb = gen_synthetic(&SyntheticSpec::with_alpha(p.r, p.l, p.alpha, grid.seed))?;
        let mut build_times = Vec::with_capacity(grid.runs);
        let mut db = None;
        for run in 0..grid.runs {
            // Free the previous build first.
            drop(db.take());
            let built = build_db(gdb.clone(), grid.p_fp, grid.seed.wrapping_add(run as u64))?;
            build_times.push(built.build_ms);
            db = Some(built);
        }
        let db = db.expect("runs >= 5");
        let build_ms = median(&mut build_times);
        let egdb_bytes = db.egdb.serialized_len();

        let mut rng = ChaCha20Rng::seed_from_u64(grid.seed);
        for q in &points[i..i + same_db] {
            let query = bench_query(&db.gdb, q.n, q.query_type, &mut rng);
            let eq = q_encode(&query, &FrequencyHint::new()).expect("bench query has an sterm");
            let (tokgen_ms, search_ms) = time_query(&db, &eq, grid.runs)?;
            let report = BenchReport {
                r: q.r,
                l: q.l,
                alpha: q.alpha,
                n: q.n,
                gamma: Gamma::for_query(q.query_type).as_u8(),
                build_ms,
                tokgen_ms,
                search_ms,
                egdb_bytes,
            };
            progress(&report);
            reports.push(report);
        }
        i += same_db;
    }
    Ok(reports)
}

pub fn write_csv<W: Write>(reports: &[BenchReport], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn format_table(reports: &[BenchReport]) -> String {
    let mut s = format!(
        "{:>7} {:>6} {:>6} {:>4} {:>5} {:>12} {:>10} {:>10} {:>14}\n",
        "r", "l", "alpha", "n", "gamma", "build_ms", "tokgen_ms", "search_ms", "egdb_bytes"
    );
    for r in reports {
        s.push_str(&format!(
            "{:>7} {:>6} {:>6} {:>4} {:>5} {:>12.1} {:>10.3} {:>10.3} {:>14}\n",
            r.r, r.l, r.alpha, r.n, r.gamma, r.build_ms, r.tokgen_ms, r.search_ms, r.egdb_bytes
        ));
    }
    s
}
