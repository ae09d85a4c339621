//! Trustee: encode a CSV table, generate keys, build and write the EGDB.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::crypto::{keygen, CryptoError};
use crate::encoding::{ge_encode, parse_gdb, EncodingError};
use crate::index::{b_inv, egdb_setup, IndexError};

/// Security parameter for generated keys, in bits.
pub const DEFAULT_LAMBDA: usize = 128;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("input file not found: {}", .0.display())]
    Missing(PathBuf),
    #[error("cannot read {}: {source}", path.display())]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Parse {
        path: PathBuf,
        source: EncodingError,
    },
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildSummary {
    pub records: usize,
    pub snps: usize,
    /// Keyword/record pairs, i.e. TSet entries.
    pub entries: usize,
    pub keywords: usize,
    pub bloom_m: u64,
    pub bloom_k: u32,
    pub egdb_bytes: u64,
    pub elapsed: Duration,
}

/// Builds and writes the key file and EGDB for a CSV table.
///
/// With a seed, all randomness (keys and ciphertext nonces) comes from it and
/// both outputs are reproducible byte for byte.
pub fn trustee_build(
    csv: &Path,
    keys_out: &Path,
    egdb_out: &Path,
    p_fp: f64,
    seed: Option<u64>,
) -> Result<BuildSummary, BuildError> {
    let start = Instant::now();
    let file = File::open(csv).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => BuildError::Missing(csv.to_path_buf()),
        _ => BuildError::Read {
            path: csv.to_path_buf(),
            source: e,
        },
    })?;
    let gdb = parse_gdb(BufReader::new(file)).map_err(|source| BuildError::Parse {
        path: csv.to_path_buf(),
        source,
    })?;
    let universe = ge_encode(&gdb);
    let iinx = b_inv(&universe, &gdb);

    let mut rng = match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    };
    let keys = keygen(DEFAULT_LAMBDA, &mut rng)?;
    let egdb = egdb_setup(&keys, &iinx, p_fp, &mut rng)?;
    keys.write_file(keys_out)?;
    egdb.write_file(egdb_out)?;

    Ok(BuildSummary {
        records: gdb.record_count(),
        snps: gdb.snp_count,
        entries: iinx.pair_count(),
        keywords: iinx.keyword_count(),
        bloom_m: egdb.s_g.m(),
        bloom_k: egdb.s_g.k(),
        egdb_bytes: egdb.serialized_len(),
        elapsed: start.elapsed(),
    })
}
