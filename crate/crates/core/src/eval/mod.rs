//! Plaintext oracle, synthetic data and benchmarking.

pub mod bench;

use std::collections::BTreeSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::encoding::{
    record_keywords, Gdb, GdbRecord, Genotype, Keyword, KeywordUniverse, Predicate, Query,
    QueryType,
};
use crate::query::Answer;

/// Answers a query by scanning the plaintext table.
///
/// Count and Boolean queries are conjunctions with negation. Match queries
/// require the first predicate and at least k' of the others.
pub fn oracle_eval(gdb: &Gdb, q: &Query) -> Answer {
    let holds = |kws: &BTreeSet<Keyword>, p: &Predicate| kws.contains(&p.keyword) != p.negated;
    let ids: Vec<u64> = gdb
        .records
        .iter()
        .filter(|rec| {
            let kws = record_keywords(rec);
            match q.query_type {
                QueryType::Count | QueryType::Boolean => {
                    q.predicates.iter().all(|p| holds(&kws, p))
                }
                QueryType::Match => {
                    let (anchor, rest) = q.predicates.split_first().expect("validated query");
                    let j = rest.iter().filter(|p| holds(&kws, p)).count();
                    holds(&kws, anchor) && j >= q.k_prime.unwrap_or(usize::MAX)
                }
            }
        })
        .map(|rec| rec.id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    match q.query_type {
        QueryType::Count => Answer::Count(ids.len() as u64),
        QueryType::Boolean | QueryType::Match => Answer::Ids(ids),
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("phenotype counts sum to {sum}, expected r = {r}")]
    PhenotypeCounts { sum: usize, r: usize },
    #[error("{models} SNP models given for l = {l}")]
    SnpCount { models: usize, l: usize },
    #[error("SNP {snp}: {msg}")]
    SnpModel { snp: usize, msg: String },
    #[error("metadata column {column:?}: {msg}")]
    Metadata { column: String, msg: String },
}

/// Genotype frequencies at one SNP.
#[derive(Clone, Debug, PartialEq)]
pub struct SnpModel {
    pub genotypes: Vec<(Genotype, f64)>,
}

impl SnpModel {
    /// Hardy-Weinberg proportions p^2, 2pq, q^2 for alleles `a` (frequency
    /// `1 - maf`) and `b` (frequency `maf`).
    pub fn hardy_weinberg(a: u8, b: u8, maf: f64) -> Self {
        let gt = |x: u8, y: u8| -> Genotype {
            let s = [x, y];
            std::str::from_utf8(&s).unwrap().parse().expect("valid bases")
        };
        let p = 1.0 - maf;
        SnpModel {
            genotypes: vec![
                (gt(a, a), p * p),
                (gt(a, b), 2.0 * p * maf),
                (gt(b, b), maf * maf),
            ],
        }
    }

    fn validate(&self, snp: usize) -> Result<(), SpecError> {
        let err = |msg: String| Err(SpecError::SnpModel { snp, msg });
        if self.genotypes.is_empty() || self.genotypes.len() > 3 {
            return err(format!("{} genotypes, expected 1 to 3", self.genotypes.len()));
        }
        if self.genotypes.iter().any(|(_, f)| !(*f >= 0.0)) {
            return err("negative frequency".into());
        }
        let sum: f64 = self.genotypes.iter().map(|(_, f)| f).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return err(format!("frequencies sum to {sum}"));
        }
        Ok(())
    }
}

/// A categorical metadata column, e.g. gender.
#[derive(Clone, Debug, PartialEq)]
pub struct MetadataModel {
    pub column: String,
    pub values: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub r: usize,
    pub l: usize,
    /// Exact record count per phenotype label.
    pub phenotypes: Vec<(String, usize)>,
    pub snps: Vec<SnpModel>,
    pub metadata: Vec<MetadataModel>,
    pub seed: u64,
}

const BASES: [u8; 4] = *b"ACGT";

impl SyntheticSpec {
    /// Hardy-Weinberg SNPs with seeded random allele pairs and minor-allele
    /// frequencies in [0.05, 0.5].
    pub fn hardy_weinberg(r: usize, l: usize, phenotypes: Vec<(String, usize)>, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let snps = (0..l)
            .map(|_| {
                let mut bases = BASES;
                bases.shuffle(&mut rng);
                SnpModel::hardy_weinberg(bases[0], bases[1], rng.gen_range(0.05..=0.5))
            })
            .collect();
        SyntheticSpec {
            r,
            l,
            phenotypes,
            snps,
            metadata: Vec::new(),
            seed,
        }
    }

    /// `alpha` records labelled `target` and the rest `other`.
    pub fn with_alpha(r: usize, l: usize, alpha: usize, seed: u64) -> Self {
        assert!(alpha <= r, "alpha exceeds r");
        let mut phenotypes = vec![("target".to_string(), alpha)];
        if r > alpha {
            phenotypes.push(("other".to_string(), r - alpha));
        }
        Self::hardy_weinberg(r, l, phenotypes, seed)
    }

    /// Adds gender and ethnicity columns.
    pub fn with_demographics(mut self) -> Self {
        let uniform = |vals: &[&str]| {
            vals.iter().map(|v| (v.to_string(), 1.0 / vals.len() as f64)).collect()
        };
        self.metadata = vec![
            MetadataModel {
                column: "gender".into(),
                values: uniform(&["Female", "Male"]),
            },
            MetadataModel {
                column: "ethnicity".into(),
                values: uniform(&["Asian", "Black", "Hispanic", "White", "Other"]),
            },
        ];
        self
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let sum: usize = self.phenotypes.iter().map(|(_, c)| c).sum();
        if sum != self.r {
            return Err(SpecError::PhenotypeCounts { sum, r: self.r });
        }
        if self.snps.len() != self.l {
            return Err(SpecError::SnpCount {
                models: self.snps.len(),
                l: self.l,
            });
        }
        for (i, m) in self.snps.iter().enumerate() {
            m.validate(i + 1)?;
        }
        for m in &self.metadata {
            let sum: f64 = m.values.iter().map(|(_, f)| f).sum();
            if m.values.is_empty() || (sum - 1.0).abs() > 1e-9 {
                return Err(SpecError::Metadata {
                    column: m.column.clone(),
                    msg: format!("frequencies sum to {sum}"),
                });
            }
        }
        Ok(())
    }
}

/// Generates a table; deterministic in `spec.seed`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Gdb, SpecError> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<&str> = spec
        .phenotypes
        .iter()
        .flat_map(|(p, c)| std::iter::repeat(p.as_str()).take(*c))
        .collect();
    labels.shuffle(&mut rng);

    let snp_dists: Vec<WeightedIndex<f64>> = spec
        .snps
        .iter()
        .map(|m| WeightedIndex::new(m.genotypes.iter().map(|(_, f)| *f)).expect("validated"))
        .collect();
    let meta_dists: Vec<WeightedIndex<f64>> = spec
        .metadata
        .iter()
        .map(|m| WeightedIndex::new(m.values.iter().map(|(_, f)| *f)).expect("validated"))
        .collect();

    let records = labels
        .into_iter()
        .enumerate()
        .map(|(i, phenotype)| {
            let genotypes = snp_dists
                .iter()
                .zip(&spec.snps)
                .map(|(d, m)| m.genotypes[d.sample(&mut rng)].0)
                .collect();
            let metadata = meta_dists
                .iter()
                .zip(&spec.metadata)
                .map(|(d, m)| (m.column.clone(), m.values[d.sample(&mut rng)].0.clone()))
                .collect();
            GdbRecord {
                id: i as u64 + 1,
                genotypes,
                phenotype: phenotype.to_string(),
                metadata,
            }
        })
        .collect();
    Ok(Gdb {
        snp_count: spec.l,
        metadata_columns: spec.metadata.iter().map(|m| m.column.clone()).collect(),
        records,
    })
}

fn random_genotype<R: Rng>(rng: &mut R) -> Genotype {
    let s = [*BASES.choose(rng).unwrap(), *BASES.choose(rng).unwrap()];
    std::str::from_utf8(&s).unwrap().parse().expect("valid bases")
}

/// Draws a random valid query over `gdb`, biased towards keywords of one
/// record so that results are often non-empty.
///
/// Count and Boolean queries get up to 4 predicates with 0 to 2 negations;
/// Match queries get 2 to 5 predicates and a random k'.
pub fn sample_query<R: Rng>(
    gdb: &Gdb,
    universe: &KeywordUniverse,
    query_type: QueryType,
    rng: &mut R,
) -> Query {
    let rec = gdb.records.choose(rng).expect("non-empty table");
    let own: Vec<Keyword> = record_keywords(rec).into_iter().collect();
    let all: Vec<&Keyword> = universe.iter().collect();

    let anchor = match rng.gen_range(0..20) {
        0..=13 => Keyword::phenotype(&rec.phenotype),
        14..=16 => Keyword::Id(rec.id),
        _ => own.choose(rng).unwrap().clone(),
    };
    let (min, max) = match query_type {
        QueryType::Match => (2, 5),
        _ => (1, 4),
    };
    let total = rng.gen_range(min..=max);
    let mut chosen: BTreeSet<Keyword> = BTreeSet::from([anchor.clone()]);
    let mut predicates = vec![Predicate {
        keyword: anchor,
        negated: false,
    }];
    let mut attempts = 0;
    while predicates.len() < total && attempts < 100 {
        attempts += 1;
        let kw = match rng.gen_range(0..10) {
            0..=5 => own.choose(rng).unwrap().clone(),
            6..=8 => (*all.choose(rng).unwrap()).clone(),
            _ => Keyword::snp(rng.gen_range(1..=gdb.snp_count.max(1)) as u32, random_genotype(rng)),
        };
        if chosen.insert(kw.clone()) {
            predicates.push(Predicate {
                keyword: kw,
                negated: false,
            });
        }
    }
    let rest = predicates.len() - 1;
    let k_prime = match query_type {
        QueryType::Match => Some(rng.gen_range(1..=rest.max(1))),
        _ => {
            let negations = rng.gen_range(0..=rest.min(2));
            let mut idx: Vec<usize> = (1..predicates.len()).collect();
            idx.shuffle(rng);
            for &i in &idx[..negations] {
                predicates[i].negated = true;
            }
            None
        }
    };
    predicates[1..].shuffle(rng);
    Query::new(query_type, predicates, k_prime, "sampler").expect("sampled query is valid")
}

/// Least-squares line through `(x, y)` points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineFit {
    pub intercept: f64,
    pub slope: f64,
    /// Largest |y - fit(x)| / y over the points.
    pub max_rel_residual: f64,
}

pub fn affine_fit(points: &[(f64, f64)]) -> AffineFit {
    assert!(points.len() >= 2, "need at least two points");
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    let max_rel_residual = points
        .iter()
        .map(|&(x, y)| ((y - (intercept + slope * x)) / y).abs())
        .fold(0.0, f64::max);
    AffineFit {
        intercept,
        slope,
        max_rel_residual,
    }
}
