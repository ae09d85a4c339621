//! Plaintext genotype/phenotype tables, their keyword encoding, and the
//! user-facing predicate grammar.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use thiserror::Error;

use crate::crypto::framed;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodingError {
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("invalid query: {0}")]
    Query(String),
    #[error("no non-negated predicate available as search term")]
    NoSearchTerm,
}

fn query_err(msg: impl Into<String>) -> EncodingError {
    EncodingError::Query(msg.into())
}

/// A two-letter genotype over {A, C, G, T}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Genotype([u8; 2]);

impl Genotype {
    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).expect("ASCII by construction")
    }
}

impl FromStr for Genotype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let b = s.as_bytes();
        let valid = |c: u8| matches!(c, b'A' | b'C' | b'G' | b'T');
        if b.len() == 2 && valid(b[0]) && valid(b[1]) {
            Ok(Genotype([b[0], b[1]]))
        } else {
            Err(format!("invalid genotype {s:?} (expected two of A,C,G,T)"))
        }
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GdbRecord {
    pub id: u64,
    pub genotypes: Vec<Genotype>,
    pub phenotype: String,
    /// (lower-cased column name, value), in header order.
    pub metadata: Vec<(String, String)>,
}

/// The plaintext genotype/phenotype database.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Gdb {
    pub snp_count: usize,
    pub metadata_columns: Vec<String>,
    pub records: Vec<GdbRecord>,
}

impl Gdb {
    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    /// Renders the table back to the CSV layout accepted by [`parse_gdb`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ID");
        for s in 1..=self.snp_count {
            out.push_str(&format!(",SNP_{s}"));
        }
        out.push_str(",Phenotype");
        for col in &self.metadata_columns {
            out.push(',');
            out.push_str(&title_case(col));
        }
        out.push('\n');
        for rec in &self.records {
            out.push_str(&rec.id.to_string());
            for g in &rec.genotypes {
                out.push(',');
                out.push_str(g.as_str());
            }
            out.push(',');
            out.push_str(&rec.phenotype);
            for (_, v) in &rec.metadata {
                out.push(',');
                out.push_str(v);
            }
            out.push('\n');
        }
        out
    }
}

fn title_case(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn parse_snp_column(name: &str) -> Option<usize> {
    let lower = name.to_ascii_lowercase();
    let rest = lower.strip_prefix("snp")?;
    let rest = rest.strip_prefix('_').unwrap_or(rest);
    rest.parse().ok()
}

/// Reads a GDB table: `ID,SNP_1..SNP_l,Phenotype[,Gender,Ethnicity...]`.
pub fn parse_gdb<R: Read>(input: R) -> Result<Gdb, EncodingError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);

    let header = reader
        .headers()
        .map_err(|e| EncodingError::Header(e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.first().map(|c| c.eq_ignore_ascii_case("id")) != Some(true) {
        return Err(EncodingError::Header("first column must be ID".into()));
    }
    let mut snp_count = 0;
    while let Some(idx) = cols.get(1 + snp_count).and_then(|c| parse_snp_column(c)) {
        if idx != snp_count + 1 {
            return Err(EncodingError::Header(format!(
                "SNP columns must be numbered consecutively from 1; found SNP_{idx} at position {}",
                snp_count + 1
            )));
        }
        snp_count += 1;
    }
    match cols.get(1 + snp_count) {
        Some(c) if c.eq_ignore_ascii_case("phenotype") => {}
        _ => return Err(EncodingError::Header("expected Phenotype column after SNP columns".into())),
    }
    let metadata_columns: Vec<String> = cols[2 + snp_count..]
        .iter()
        .map(|c| c.to_ascii_lowercase())
        .collect();
    if let Some(bad) = metadata_columns.iter().find(|c| c.is_empty()) {
        return Err(EncodingError::Header(format!("empty metadata column name {bad:?}")));
    }

    let width = cols.len();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| EncodingError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let err = |msg: String| EncodingError::Parse { line, msg };
        if row.len() != width {
            return Err(err(format!("expected {width} fields, found {}", row.len())));
        }
        let id: u64 = row[0]
            .parse()
            .ok()
            .filter(|&id| id > 0)
            .ok_or_else(|| err(format!("invalid record id {:?}", &row[0])))?;
        if !seen.insert(id) {
            return Err(err(format!("duplicate record id {id}")));
        }
        let genotypes = (1..=snp_count)
            .map(|s| row[s].parse::<Genotype>().map_err(|m| err(format!("SNP_{s}: {m}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let phenotype = row[1 + snp_count].to_string();
        if phenotype.is_empty() {
            return Err(err("empty phenotype".into()));
        }
        let metadata = metadata_columns
            .iter()
            .zip(row.iter().skip(2 + snp_count))
            .map(|(c, v)| (c.clone(), v.to_string()))
            .collect();
        records.push(GdbRecord {
            id,
            genotypes,
            phenotype,
            metadata,
        });
    }
    Ok(Gdb {
        snp_count,
        metadata_columns,
        records,
    })
}

/// A searchable keyword.
///
/// Displayed as the plain keyword text ("2CC", "Cancer B", "ID:7"); the PRF
/// input additionally carries the keyword kind so values from different
/// columns never alias.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Keyword {
    Snp { index: u32, genotype: Genotype },
    Phenotype(String),
    Metadata { column: String, value: String },
    Id(u64),
}

impl Keyword {
    pub fn snp(index: u32, genotype: Genotype) -> Self {
        Keyword::Snp { index, genotype }
    }

    pub fn phenotype(value: &str) -> Self {
        Keyword::Phenotype(value.trim().to_string())
    }

    pub fn metadata(column: &str, value: &str) -> Self {
        Keyword::Metadata {
            column: column.trim().to_ascii_lowercase(),
            value: value.trim().to_string(),
        }
    }

    /// Injective byte encoding used as PRF input.
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Keyword::Snp { index, genotype } => {
                framed(&[b"snp", &index.to_le_bytes(), &genotype.0])
            }
            Keyword::Phenotype(v) => framed(&[b"phenotype", v.as_bytes()]),
            Keyword::Metadata { column, value } => {
                framed(&[b"meta", column.as_bytes(), value.as_bytes()])
            }
            Keyword::Id(id) => framed(&[b"id", &id.to_le_bytes()]),
        }
    }

    /// PRF input for the c-th position under this keyword (`g || c`).
    pub fn encode_with_counter(&self, c: u64) -> Vec<u8> {
        framed(&[&self.encode(), &c.to_le_bytes()])
    }

    fn is_anchor(&self) -> bool {
        matches!(self, Keyword::Phenotype(_) | Keyword::Id(_))
    }
}

impl fmt::Display for Keyword {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Keyword::Snp { index, genotype } => write!(f, "{index}{genotype}"),
            Keyword::Phenotype(v) => f.write_str(v),
            Keyword::Metadata { value, .. } => f.write_str(value),
            Keyword::Id(id) => write!(f, "ID:{id}"),
        }
    }
}

impl Ord for Keyword {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.to_string()
            .cmp(&other.to_string())
            .then_with(|| self.encode().cmp(&other.encode()))
    }
}

impl PartialOrd for Keyword {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeywordUniverse {
    /// `g_s[s-1]` holds the keywords of SNP column s.
    pub g_s: Vec<BTreeSet<Keyword>>,
    pub g_rho: BTreeSet<Keyword>,
    pub g_delta: BTreeSet<Keyword>,
    pub g_id: BTreeSet<Keyword>,
}

impl KeywordUniverse {
    pub fn iter(&self) -> impl Iterator<Item = &Keyword> {
        self.g_s
            .iter()
            .flatten()
            .chain(&self.g_rho)
            .chain(&self.g_delta)
            .chain(&self.g_id)
    }

    pub fn len(&self) -> usize {
        self.g_s.iter().map(BTreeSet::len).sum::<usize>()
            + self.g_rho.len()
            + self.g_delta.len()
            + self.g_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, g: &Keyword) -> bool {
        match g {
            Keyword::Snp { index, .. } => self
                .g_s
                .get((*index as usize).wrapping_sub(1))
                .is_some_and(|set| set.contains(g)),
            Keyword::Phenotype(_) => self.g_rho.contains(g),
            Keyword::Metadata { .. } => self.g_delta.contains(g),
            Keyword::Id(_) => self.g_id.contains(g),
        }
    }
}

pub fn ge_encode(gdb: &Gdb) -> KeywordUniverse {
    let mut universe = KeywordUniverse {
        g_s: vec![BTreeSet::new(); gdb.snp_count],
        ..Default::default()
    };
    for rec in &gdb.records {
        for (i, g) in rec.genotypes.iter().enumerate() {
            universe.g_s[i].insert(Keyword::snp(i as u32 + 1, *g));
        }
        universe.g_rho.insert(Keyword::phenotype(&rec.phenotype));
        for (col, value) in &rec.metadata {
            universe.g_delta.insert(Keyword::metadata(col, value));
        }
        universe.g_id.insert(Keyword::Id(rec.id));
    }
    universe
}

/// All keywords a record carries: one per SNP, its phenotype, its metadata
/// values and its own ID keyword.
pub fn record_keywords(rec: &GdbRecord) -> BTreeSet<Keyword> {
    let mut out: BTreeSet<Keyword> = rec
        .genotypes
        .iter()
        .enumerate()
        .map(|(i, g)| Keyword::snp(i as u32 + 1, *g))
        .collect();
    out.insert(Keyword::phenotype(&rec.phenotype));
    out.extend(rec.metadata.iter().map(|(c, v)| Keyword::metadata(c, v)));
    out.insert(Keyword::Id(rec.id));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QueryType {
    Count,
    Boolean,
    Match,
}

impl FromStr for QueryType {
    type Err = EncodingError;

    fn from_str(s: &str) -> Result<Self, EncodingError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "count" => Ok(QueryType::Count),
            "boolean" | "bool" => Ok(QueryType::Boolean),
            "match" => Ok(QueryType::Match),
            other => Err(query_err(format!("unknown query type {other:?}"))),
        }
    }
}

impl fmt::Display for QueryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryType::Count => "count",
            QueryType::Boolean => "boolean",
            QueryType::Match => "match",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Predicate {
    pub keyword: Keyword,
    pub negated: bool,
}

/// A validated user query.
///
/// For `Match` queries the first predicate is the required anchor and `k_prime`
/// counts matches among the remaining ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    pub query_type: QueryType,
    pub predicates: Vec<Predicate>,
    pub k_prime: Option<usize>,
    pub user: String,
}

impl Query {
    pub fn new(
        query_type: QueryType,
        predicates: Vec<Predicate>,
        k_prime: Option<usize>,
        user: &str,
    ) -> Result<Self, EncodingError> {
        let q = Query {
            query_type,
            predicates,
            k_prime,
            user: user.to_string(),
        };
        q.validate()?;
        Ok(q)
    }

    fn validate(&self) -> Result<(), EncodingError> {
        if self.predicates.is_empty() {
            return Err(query_err("query has no predicates"));
        }
        match self.query_type {
            QueryType::Match => {
                if self.predicates.iter().any(|p| p.negated) {
                    return Err(query_err("negated predicates are not allowed in match queries"));
                }
                let rest = self.predicates.len() - 1;
                match self.k_prime {
                    None => return Err(query_err("match queries require k'")),
                    Some(0) => return Err(query_err("k' must be at least 1")),
                    Some(k) if k > rest => {
                        return Err(query_err(format!(
                            "k'={k} exceeds the {rest} predicates after the first"
                        )))
                    }
                    Some(_) => {}
                }
            }
            QueryType::Count | QueryType::Boolean => {
                if self.k_prime.is_some() {
                    return Err(query_err("k' is only valid for match queries"));
                }
            }
        }
        Ok(())
    }
}

fn parse_term(term: &str) -> Result<Predicate, EncodingError> {
    let (field, value, negated) = if let Some((f, v)) = term.split_once("!=") {
        (f, v, true)
    } else if let Some((f, v)) = term.split_once('=') {
        (f, v, false)
    } else {
        return Err(query_err(format!("term {term:?} is not field=value or field!=value")));
    };
    let field = field.trim();
    let value = value.trim();
    if value.is_empty() {
        return Err(query_err(format!("empty value in {term:?}")));
    }
    let lower = field.to_ascii_lowercase();
    let keyword = match lower.as_str() {
        "phenotype" | "diagnoses" => Keyword::phenotype(value),
        "gender" | "ethnicity" => Keyword::metadata(&lower, value),
        "id" => Keyword::Id(
            value
                .parse()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| query_err(format!("invalid id {value:?}")))?,
        ),
        _ => match parse_snp_column(field) {
            Some(s) if s >= 1 && s <= u32::MAX as usize => {
                let genotype = value.to_ascii_uppercase().parse().map_err(query_err)?;
                Keyword::snp(s as u32, genotype)
            }
            _ => return Err(query_err(format!("unknown field {field:?}"))),
        },
    };
    Ok(Predicate { keyword, negated })
}

/// Parses a predicate expression.
///
/// Terms are comma-separated `field=value` / `field!=value`. A single group of
/// `|`-separated alternatives alongside exactly one other term is compiled to a
/// match query with k'=1 anchored on that term.
pub fn parse_query(
    text: &str,
    query_type: QueryType,
    k_prime: Option<usize>,
    user: &str,
) -> Result<Query, EncodingError> {
    let terms: Vec<&str> = text.split(',').map(str::trim).collect();
    if terms.iter().any(|t| t.is_empty()) {
        return Err(query_err("empty term"));
    }
    let (groups, plain): (Vec<&str>, Vec<&str>) = terms.iter().partition(|t| t.contains('|'));
    if groups.is_empty() {
        let predicates = plain.into_iter().map(parse_term).collect::<Result<Vec<_>, _>>()?;
        return Query::new(query_type, predicates, k_prime, user);
    }

    if query_type == QueryType::Count {
        return Err(query_err("disjunctions are only supported for boolean and match queries"));
    }
    if groups.len() != 1 || plain.len() != 1 {
        return Err(query_err(
            "a disjunction must appear as one `a|b|..` group next to exactly one anchor term",
        ));
    }
    if k_prime.is_some_and(|k| k != 1) {
        return Err(query_err("a disjunction implies k'=1"));
    }
    let mut predicates = vec![parse_term(plain[0])?];
    for alt in groups[0].split('|') {
        predicates.push(parse_term(alt.trim())?);
    }
    if predicates.iter().any(|p| p.negated) {
        return Err(query_err("negation is not supported inside a disjunction"));
    }
    Query::new(QueryType::Match, predicates, Some(1), user)
}

/// Per-keyword record counts known to the vetter. Unknown keywords sort last.
pub type FrequencyHint = HashMap<Keyword, usize>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedQuery {
    pub sterm: Keyword,
    /// (keyword, negated) in query order.
    pub xterms: Vec<(Keyword, bool)>,
    pub query_type: QueryType,
    pub k_prime: Option<usize>,
}

impl EncodedQuery {
    pub fn negated_count(&self) -> usize {
        self.xterms.iter().filter(|(_, n)| *n).count()
    }
}

/// Maps a query onto (sterm, xterms).
///
/// Match queries are anchored on their first predicate. Otherwise a non-negated
/// phenotype or ID predicate is preferred, then the least frequent non-negated
/// keyword; ties break on keyword order.
pub fn q_encode(q: &Query, freq: &FrequencyHint) -> Result<EncodedQuery, EncodingError> {
    let sterm_index = if q.query_type == QueryType::Match {
        0
    } else {
        let rank = |p: &Predicate| {
            (
                !p.keyword.is_anchor(),
                freq.get(&p.keyword).copied().unwrap_or(usize::MAX),
                p.keyword.clone(),
            )
        };
        q.predicates
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.negated)
            .min_by(|(_, a), (_, b)| rank(a).cmp(&rank(b)))
            .map(|(i, _)| i)
            .ok_or(EncodingError::NoSearchTerm)?
    };
    let sterm = q.predicates[sterm_index].keyword.clone();
    let xterms = q
        .predicates
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != sterm_index)
        .map(|(_, p)| (p.keyword.clone(), p.negated))
        .collect();
    Ok(EncodedQuery {
        sterm,
        xterms,
        query_type: q.query_type,
        k_prime: q.k_prime,
    })
}
