//! Encrypted database construction: inverted index, TSet, XSet and the EGDB file.

pub mod bloom;
pub mod tset;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::crypto::{
    base_pow, batch_inverse, framed, prf_f, prf_fp, CryptoError, IdSealer, KeySet, Scalar,
    GROUP_RISTRETTO255,
};
use crate::encoding::{record_keywords, Gdb, Keyword, KeywordUniverse};

pub use bloom::{optimal_params, BloomFilter, DEFAULT_FP_RATE};
pub use tset::{tset_gettag, tset_retrieve, tset_setup, TSet, TSetBuilder, TSetTuple, PAYLOAD_LEN};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("not an EGDB file (bad magic)")]
    Magic,
    #[error("unsupported EGDB format version {0}")]
    Version(u16),
    #[error("unsupported group id {0}")]
    Group(u8),
    #[error("EGDB file truncated")]
    Truncated,
    #[error("EGDB checksum mismatch")]
    Checksum,
    #[error("EGDB format error: {0}")]
    Format(String),
    #[error("corrupt index: {0}")]
    Corrupt(String),
    #[error("duplicate TSet label")]
    LabelCollision,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Keyword to ascending record IDs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InvertedIndex {
    lists: BTreeMap<Keyword, Vec<u64>>,
}

impl InvertedIndex {
    pub fn get(&self, g: &Keyword) -> &[u64] {
        self.lists.get(g).map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Keyword, &[u64])> {
        self.lists.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn keyword_count(&self) -> usize {
        self.lists.len()
    }

    /// N: total (keyword, ID) pairs.
    pub fn pair_count(&self) -> usize {
        self.lists.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// Record counts per keyword, usable as a sterm frequency hint.
    pub fn frequencies(&self) -> HashMap<Keyword, usize> {
        self.lists.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }
}

pub fn b_inv(universe: &KeywordUniverse, gdb: &Gdb) -> InvertedIndex {
    let mut lists: HashMap<Keyword, Vec<u64>> =
        universe.iter().map(|g| (g.clone(), Vec::new())).collect();
    let mut records: Vec<_> = gdb.records.iter().collect();
    records.sort_by_key(|r| r.id);
    for rec in records {
        for g in record_keywords(rec) {
            if let Some(list) = lists.get_mut(&g) {
                list.push(rec.id);
            }
        }
    }
    InvertedIndex {
        lists: lists.into_iter().filter(|(_, v)| !v.is_empty()).collect(),
    }
}

/// Setup parameters recorded with the EGDB.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgdbParams {
    pub p_fp: f64,
    pub group_id: u8,
}

/// The encrypted database held by the data server.
#[derive(Clone, Debug, PartialEq)]
pub struct Egdb {
    pub inv_g: TSet,
    pub s_g: BloomFilter,
    pub params: EgdbParams,
}

/// PRF input for a record ID.
pub fn id_input(id: u64) -> Vec<u8> {
    framed(&[b"record", &id.to_le_bytes()])
}

/// Builds the TSet and XSet for an inverted index.
///
/// For the c-th ID of keyword g (c from 1): y = F_p(K_I, ID) / F_p(K_Z, g||c),
/// the tuple (y, E(F(K_S, g), ID)) goes to the TSet and the xtag
/// h^(F_p(K_X, g) * F_p(K_I, ID)) to the Bloom filter.
pub fn egdb_setup<R: RngCore + CryptoRng>(
    keys: &KeySet,
    iinx: &InvertedIndex,
    p_fp: f64,
    rng: &mut R,
) -> Result<Egdb, IndexError> {
    let n = iinx.pair_count();
    let mut s_g = BloomFilter::new(n as u64, p_fp);
    let mut builder = TSetBuilder::new(keys.k_t.as_bytes().len(), n);
    let mut xids: HashMap<u64, Scalar> = HashMap::new();

    for (g, ids) in iinx.iter() {
        let g_bytes = g.encode();
        let sealer = IdSealer::new(&prf_f(&keys.k_s, &g_bytes))?;
        let xkey = prf_fp(&keys.k_x, &g_bytes);

        let mut z: Vec<Scalar> = (1..=ids.len() as u64)
            .map(|c| prf_fp(&keys.k_z, &g.encode_with_counter(c)))
            .collect();
        batch_inverse(&mut z)?;

        let mut tuples = Vec::with_capacity(ids.len());
        for (&id, z_inv) in ids.iter().zip(z) {
            let xid = *xids
                .entry(id)
                .or_insert_with(|| prf_fp(&keys.k_i, &id_input(id)));
            tuples.push(TSetTuple {
                y: xid * z_inv,
                id_ct: sealer.seal(id, rng),
            });
            s_g.insert(base_pow(xkey * xid).as_bytes());
        }
        builder.add(&tset_gettag(&keys.k_t, g), &tuples);
    }

    Ok(Egdb {
        inv_g: builder.finish()?,
        s_g,
        params: EgdbParams {
            p_fp,
            group_id: GROUP_RISTRETTO255,
        },
    })
}

const EGDB_MAGIC: &[u8; 8] = b"PGDBEDB1";
const EGDB_VERSION: u16 = 1;

impl Egdb {
    /// Exact size of [`serialize_egdb`]'s output.
    pub fn serialized_len(&self) -> u64 {
        let header = 8 + 2 + 1 + 8 + 1 + self.s_g.m().div_ceil(8) + 8 + 1 + 2 + 8;
        let entries = self.inv_g.len() as u64
            * (self.inv_g.label_len() + self.inv_g.payload_len()) as u64;
        header + entries + 4
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<(), IndexError> {
        let mut out = ChecksumWriter {
            inner: out,
            hasher: crc32fast::Hasher::new(),
        };
        out.write_all(EGDB_MAGIC)?;
        out.write_all(&EGDB_VERSION.to_le_bytes())?;
        out.write_all(&[self.params.group_id])?;
        out.write_all(&self.s_g.m().to_le_bytes())?;
        let k = u8::try_from(self.s_g.k())
            .map_err(|_| IndexError::Format("bloom hash count exceeds 255".into()))?;
        out.write_all(&[k])?;
        out.write_all(&self.s_g.bits())?;
        out.write_all(&(self.inv_g.len() as u64).to_le_bytes())?;
        out.write_all(&[self.inv_g.label_len() as u8])?;
        out.write_all(&(self.inv_g.payload_len() as u16).to_le_bytes())?;
        out.write_all(&self.params.p_fp.to_le_bytes())?;
        for (label, payload) in self.inv_g.entries() {
            out.write_all(label)?;
            out.write_all(payload)?;
        }
        let crc = out.hasher.clone().finalize();
        out.inner.write_all(&crc.to_le_bytes())?;
        out.inner.flush()?;
        Ok(())
    }

    pub fn write_file(&self, path: &Path) -> Result<(), IndexError> {
        self.write_to(BufWriter::new(fs::File::create(path)?))
    }

    pub fn read_file(path: &Path) -> Result<Self, IndexError> {
        deserialize_egdb(&fs::read(path)?)
    }
}

struct ChecksumWriter<W> {
    inner: W,
    hasher: crc32fast::Hasher,
}

impl<W: Write> Write for ChecksumWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

pub fn serialize_egdb(egdb: &Egdb) -> Vec<u8> {
    let mut out = Vec::with_capacity(egdb.serialized_len() as usize);
    egdb.write_to(&mut out).expect("writing to a Vec cannot fail");
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        if self.buf.len() < n {
            return Err(IndexError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, IndexError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn deserialize_egdb(bytes: &[u8]) -> Result<Egdb, IndexError> {
    if bytes.len() < EGDB_MAGIC.len() {
        return Err(IndexError::Truncated);
    }
    if &bytes[..8] != EGDB_MAGIC {
        return Err(IndexError::Magic);
    }
    let mut cur = Cursor { buf: &bytes[8..] };
    let version = cur.u16()?;
    if version != EGDB_VERSION {
        return Err(IndexError::Version(version));
    }
    let group_id = cur.u8()?;
    if group_id != GROUP_RISTRETTO255 {
        return Err(IndexError::Group(group_id));
    }
    let m = cur.u64()?;
    let k = cur.u8()? as u32;
    let bit_len = usize::try_from(m.div_ceil(8)).map_err(|_| IndexError::Truncated)?;
    let bits = cur.take(bit_len)?;
    let s_g = BloomFilter::from_parts(m, k, bits)
        .ok_or_else(|| IndexError::Format("invalid bloom filter parameters".into()))?;
    let count = cur.u64()?;
    let label_len = cur.u8()? as usize;
    let payload_len = cur.u16()? as usize;
    let p_fp = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let entry_bytes = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(label_len + payload_len))
        .ok_or(IndexError::Truncated)?;
    let body = cur.take(entry_bytes)?;
    let trailer = cur.take(4)?;
    if !cur.buf.is_empty() {
        return Err(IndexError::Format(format!("{} trailing bytes", cur.buf.len())));
    }
    let expected = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(&bytes[..bytes.len() - 4]) != expected {
        return Err(IndexError::Checksum);
    }

    let mut labels = Vec::with_capacity(count as usize * label_len);
    let mut payloads = Vec::with_capacity(count as usize * payload_len);
    for entry in body.chunks_exact(label_len + payload_len) {
        labels.extend_from_slice(&entry[..label_len]);
        payloads.extend_from_slice(&entry[label_len..]);
    }
    Ok(Egdb {
        inv_g: TSet::from_sorted(label_len, payload_len, labels, payloads)?,
        s_g,
        params: EgdbParams { p_fp, group_id },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{group_pow, keygen, scalar_inverse, sym_decrypt};
    use crate::encoding::{ge_encode, parse_gdb};
    use crate::fixtures::SAMPLE_CSV;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn sample() -> (Gdb, InvertedIndex) {
        let gdb = parse_gdb(SAMPLE_CSV.as_bytes()).unwrap();
        let iinx = b_inv(&ge_encode(&gdb), &gdb);
        (gdb, iinx)
    }

    fn setup(seed: u64) -> (KeySet, InvertedIndex, Egdb) {
        let (_, iinx) = sample();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let keys = keygen(128, &mut rng).unwrap();
        let egdb = egdb_setup(&keys, &iinx, DEFAULT_FP_RATE, &mut rng).unwrap();
        (keys, iinx, egdb)
    }

    #[test]
    fn inverted_lists_sample() {
        let (gdb, iinx) = sample();
        assert_eq!(iinx.get(&Keyword::phenotype("Cancer B")), &[2, 5, 7]);
        let cc = Keyword::snp(2, "CC".parse().unwrap());
        assert_eq!(iinx.get(&cc), &[1, 2, 4, 5, 6]);
        assert_eq!(iinx.pair_count(), 42);
        let by_records: usize = gdb.records.iter().map(|r| record_keywords(r).len()).sum();
        assert_eq!(iinx.pair_count(), by_records);
    }

    #[test]
    fn empty_gdb_gives_empty_index_and_egdb() {
        let gdb = parse_gdb("ID,SNP_1,Phenotype\n".as_bytes()).unwrap();
        let iinx = b_inv(&ge_encode(&gdb), &gdb);
        assert!(iinx.is_empty());
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let keys = keygen(128, &mut rng).unwrap();
        let egdb = egdb_setup(&keys, &iinx, DEFAULT_FP_RATE, &mut rng).unwrap();
        assert!(egdb.inv_g.is_empty());
        assert_eq!(egdb.s_g.m(), 64);
        assert!(!egdb.s_g.contains(base_pow(Scalar::random(&mut rng)).as_bytes()));
        let stag = tset_gettag(&keys.k_t, &Keyword::phenotype("x"));
        assert!(tset_retrieve(&egdb.inv_g, &stag).unwrap().is_empty());
    }

    #[test]
    fn setup_counts_and_retrieval_round_trip() {
        let (keys, iinx, egdb) = setup(1);
        assert_eq!(egdb.inv_g.len(), 42);
        for (g, ids) in iinx.iter() {
            let tuples = tset_retrieve(&egdb.inv_g, &tset_gettag(&keys.k_t, g)).unwrap();
            let k_e = prf_f(&keys.k_s, &g.encode());
            let got: Vec<u64> = tuples.iter().map(|t| sym_decrypt(&k_e, &t.id_ct).unwrap()).collect();
            assert_eq!(got, ids, "keyword {g}");
        }
        let cb = tset_retrieve(&egdb.inv_g, &tset_gettag(&keys.k_t, &Keyword::phenotype("Cancer B"))).unwrap();
        assert_eq!(cb.len(), 3);
    }

    #[test]
    fn every_xtag_is_in_the_bloom_filter() {
        let (keys, iinx, egdb) = setup(2);
        for (g, ids) in iinx.iter() {
            let xkey = prf_fp(&keys.k_x, &g.encode());
            for &id in ids {
                let xtag = base_pow(xkey * prf_fp(&keys.k_i, &id_input(id)));
                assert!(egdb.s_g.contains(xtag.as_bytes()));
            }
        }
    }

    #[test]
    fn cross_tag_identity_on_sample() {
        let (keys, iinx, egdb) = setup(3);
        for (g1, ids) in iinx.iter() {
            let tuples = tset_retrieve(&egdb.inv_g, &tset_gettag(&keys.k_t, g1)).unwrap();
            for (c, (&id, tuple)) in ids.iter().zip(&tuples).enumerate() {
                let z = prf_fp(&keys.k_z, &g1.encode_with_counter(c as u64 + 1));
                let xid = prf_fp(&keys.k_i, &id_input(id));
                assert_eq!(tuple.y, xid * scalar_inverse(z).unwrap());
                for (gi, _) in iinx.iter().filter(|(_, l)| l.contains(&id)) {
                    let xg = prf_fp(&keys.k_x, &gi.encode());
                    let token = base_pow(z * xg);
                    assert_eq!(group_pow(&token, tuple.y).unwrap(), base_pow(xg * xid));
                }
            }
        }
    }

    #[test]
    fn serialization_round_trip_is_byte_exact() {
        let (_, _, egdb) = setup(4);
        let bytes = serialize_egdb(&egdb);
        assert_eq!(bytes.len() as u64, egdb.serialized_len());
        assert_eq!(&bytes[..8], b"PGDBEDB1");
        let back = deserialize_egdb(&bytes).unwrap();
        assert_eq!(back, egdb);
        assert_eq!(serialize_egdb(&back), bytes);
    }

    #[test]
    fn seeded_setup_is_deterministic() {
        let a = serialize_egdb(&setup(5).2);
        let b = serialize_egdb(&setup(5).2);
        assert_eq!(a, b);
    }

    #[test]
    fn deserialize_rejects_damage() {
        let (_, _, egdb) = setup(6);
        let bytes = serialize_egdb(&egdb);
        assert!(matches!(deserialize_egdb(&bytes[..bytes.len() - 10]), Err(IndexError::Truncated)));
        assert!(matches!(deserialize_egdb(&bytes[..4]), Err(IndexError::Truncated)));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(deserialize_egdb(&wrong), Err(IndexError::Magic)));
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 40;
        flipped[mid] ^= 1;
        assert!(matches!(deserialize_egdb(&flipped), Err(IndexError::Checksum)));
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(deserialize_egdb(&version), Err(IndexError::Version(9))));
    }
}
