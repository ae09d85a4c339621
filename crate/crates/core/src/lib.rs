//! Encrypted storage and querying of SNP genotype / phenotype tables.
//!
//! A trustee encodes each record into keywords, builds an inverted index and
//! encrypts it into an [`index::Egdb`]: a TSet of blinded, encrypted record
//! IDs plus a Bloom-filter XSet of cross-tags. A vetter holding the
//! [`crypto::KeySet`] turns user queries into search tokens; the data server
//! evaluates conjunctions, negations and k'-of-k thresholds over the EGDB
//! without learning keywords, IDs or results.

pub mod crypto;
pub mod encoding;
pub mod eval;
pub mod index;
pub mod query;
pub mod services;

pub mod fixtures {
    //! Bundled sample data.

    /// Seven records over four SNPs with a phenotype column.
    pub const SAMPLE_CSV: &str = include_str!("../fixtures/sample.csv");
}
