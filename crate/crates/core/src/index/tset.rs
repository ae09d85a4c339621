//! TSet: a label-addressed table of masked per-keyword tuples.
//!
//! For a keyword with tag `stag`, the c-th tuple lives at `H1(stag, c)` and is
//! XOR-masked with `H2(stag, c)`; both are HMAC-SHA256 expansions keyed by the
//! tag under distinct domain bytes. Retrieval walks c = 1, 2, ... until the
//! tuple whose continuation byte marks it as the last one.

use hmac::{Hmac, Mac};
use sha2::Sha256;

use crate::crypto::{
    prf_f, EncryptedId, Key, PrfOutput, Scalar, ENCRYPTED_ID_LEN, SCALAR_LEN,
};
use crate::encoding::Keyword;

use super::IndexError;

type HmacSha256 = Hmac<Sha256>;

/// y || id_ct || continuation byte.
pub const PAYLOAD_LEN: usize = SCALAR_LEN + ENCRYPTED_ID_LEN + 1;

const LABEL_DOMAIN: u8 = 0x01;
const MASK_DOMAIN: u8 = 0x02;

/// The per-record tuple stored under a keyword.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TSetTuple {
    pub y: Scalar,
    pub id_ct: EncryptedId,
}

/// TSet tag of a keyword.
pub fn tset_gettag(k_t: &Key, g: &Keyword) -> PrfOutput {
    prf_f(k_t, &g.encode())
}

fn label(stag: &PrfOutput, c: u64, out: &mut [u8]) {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(stag.as_bytes()).expect("any key length");
    mac.update(&[LABEL_DOMAIN]);
    mac.update(&c.to_le_bytes());
    let digest = mac.finalize().into_bytes();
    out.copy_from_slice(&digest[..out.len()]);
}

fn apply_mask(stag: &PrfOutput, c: u64, buf: &mut [u8]) {
    for (block, chunk) in buf.chunks_mut(32).enumerate() {
        let mut mac = <HmacSha256 as Mac>::new_from_slice(stag.as_bytes()).expect("any key length");
        mac.update(&[MASK_DOMAIN]);
        mac.update(&c.to_le_bytes());
        mac.update(&(block as u32).to_le_bytes());
        let digest = mac.finalize().into_bytes();
        for (b, m) in chunk.iter_mut().zip(digest.iter()) {
            *b ^= m;
        }
    }
}

fn encode_payload(tuple: &TSetTuple, last: bool) -> [u8; PAYLOAD_LEN] {
    let mut out = [0u8; PAYLOAD_LEN];
    out[..SCALAR_LEN].copy_from_slice(&tuple.y.to_bytes());
    out[SCALAR_LEN..SCALAR_LEN + ENCRYPTED_ID_LEN].copy_from_slice(tuple.id_ct.as_bytes());
    out[PAYLOAD_LEN - 1] = last as u8;
    out
}

fn decode_payload(buf: &[u8]) -> Result<(TSetTuple, bool), IndexError> {
    let corrupt = || IndexError::Corrupt("tuple payload failed to decode".into());
    let y_bytes: [u8; SCALAR_LEN] = buf[..SCALAR_LEN].try_into().unwrap();
    let y = Scalar::from_canonical_bytes(y_bytes).map_err(|_| corrupt())?;
    let id_ct = EncryptedId::from_bytes(&buf[SCALAR_LEN..SCALAR_LEN + ENCRYPTED_ID_LEN])
        .map_err(|_| corrupt())?;
    let last = match buf[PAYLOAD_LEN - 1] {
        0 => false,
        1 => true,
        _ => return Err(corrupt()),
    };
    Ok((TSetTuple { y, id_ct }, last))
}

/// Sorted flat arrays of labels and masked payloads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TSet {
    label_len: usize,
    payload_len: usize,
    labels: Vec<u8>,
    payloads: Vec<u8>,
}

impl TSet {
    pub fn label_len(&self) -> usize {
        self.label_len
    }

    pub fn payload_len(&self) -> usize {
        self.payload_len
    }

    pub fn len(&self) -> usize {
        self.labels.len() / self.label_len
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[u8], &[u8])> {
        self.labels
            .chunks_exact(self.label_len)
            .zip(self.payloads.chunks_exact(self.payload_len))
    }

    /// Rebuilds a TSet from (label, payload) pairs already in strictly ascending label order.
    pub fn from_sorted(
        label_len: usize,
        payload_len: usize,
        labels: Vec<u8>,
        payloads: Vec<u8>,
    ) -> Result<Self, IndexError> {
        if label_len == 0 || payload_len != PAYLOAD_LEN {
            return Err(IndexError::Format(format!(
                "unsupported label/payload width {label_len}/{payload_len}"
            )));
        }
        if labels.len() % label_len != 0 || labels.len() / label_len != payloads.len() / payload_len
        {
            return Err(IndexError::Format("label and payload counts differ".into()));
        }
        let ordered = labels
            .chunks_exact(label_len)
            .zip(labels.chunks_exact(label_len).skip(1))
            .all(|(a, b)| a < b);
        if !ordered {
            return Err(IndexError::Format("labels are not strictly ascending".into()));
        }
        Ok(TSet {
            label_len,
            payload_len,
            labels,
            payloads,
        })
    }

    fn lookup(&self, label: &[u8]) -> Option<&[u8]> {
        let n = self.len();
        let (mut lo, mut hi) = (0usize, n);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            let cand = &self.labels[mid * self.label_len..(mid + 1) * self.label_len];
            match cand.cmp(label) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => {
                    return Some(&self.payloads[mid * self.payload_len..(mid + 1) * self.payload_len])
                }
            }
        }
        None
    }
}

/// Accumulates masked tuples keyword by keyword, then sorts once.
pub struct TSetBuilder {
    label_len: usize,
    labels: Vec<u8>,
    payloads: Vec<u8>,
}

impl TSetBuilder {
    pub fn new(label_len: usize, expected_entries: usize) -> Self {
        TSetBuilder {
            label_len,
            labels: Vec::with_capacity(expected_entries * label_len),
            payloads: Vec::with_capacity(expected_entries * PAYLOAD_LEN),
        }
    }

    /// Adds the tuples of one keyword in counter order (c = 1, 2, ...).
    pub fn add(&mut self, stag: &PrfOutput, tuples: &[TSetTuple]) {
        let mut lab = vec![0u8; self.label_len];
        for (i, tuple) in tuples.iter().enumerate() {
            let c = i as u64 + 1;
            label(stag, c, &mut lab);
            self.labels.extend_from_slice(&lab);
            let mut payload = encode_payload(tuple, i + 1 == tuples.len());
            apply_mask(stag, c, &mut payload);
            self.payloads.extend_from_slice(&payload);
        }
    }

    pub fn finish(self) -> Result<TSet, IndexError> {
        let ll = self.label_len;
        let n = self.labels.len() / ll;
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_unstable_by(|&a, &b| {
            let a = a as usize;
            let b = b as usize;
            self.labels[a * ll..(a + 1) * ll].cmp(&self.labels[b * ll..(b + 1) * ll])
        });
        let mut labels = Vec::with_capacity(self.labels.len());
        let mut payloads = Vec::with_capacity(self.payloads.len());
        for &i in &order {
            let i = i as usize;
            let lab = &self.labels[i * ll..(i + 1) * ll];
            if labels.len() >= ll && &labels[labels.len() - ll..] == lab {
                return Err(IndexError::LabelCollision);
            }
            labels.extend_from_slice(lab);
            payloads.extend_from_slice(&self.payloads[i * PAYLOAD_LEN..(i + 1) * PAYLOAD_LEN]);
        }
        drop(self.labels);
        drop(self.payloads);
        Ok(TSet {
            label_len: ll,
            payload_len: PAYLOAD_LEN,
            labels,
            payloads,
        })
    }
}

/// Builds a TSet from per-keyword tuple lists, each in counter order.
pub fn tset_setup<'a, I>(k_t: &Key, lists: I) -> Result<TSet, IndexError>
where
    I: IntoIterator<Item = (&'a Keyword, &'a [TSetTuple])>,
{
    let mut builder = TSetBuilder::new(k_t.as_bytes().len(), 0);
    for (g, tuples) in lists {
        builder.add(&tset_gettag(k_t, g), tuples);
    }
    builder.finish()
}

/// Unmasks the tuples stored under `stag`, in counter order.
pub fn tset_retrieve(tset: &TSet, stag: &PrfOutput) -> Result<Vec<TSetTuple>, IndexError> {
    let mut out = Vec::new();
    let mut lab = vec![0u8; tset.label_len];
    for c in 1u64.. {
        label(stag, c, &mut lab);
        let Some(masked) = tset.lookup(&lab) else {
            if c == 1 {
                return Ok(out);
            }
            return Err(IndexError::Corrupt(format!("tuple {c} missing before end of list")));
        };
        let mut payload = masked.to_vec();
        apply_mask(stag, c, &mut payload);
        let (tuple, last) = decode_payload(&payload)?;
        out.push(tuple);
        if last {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen, sym_encrypt};
    use crate::encoding::Genotype;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn kw(s: &str) -> Keyword {
        Keyword::phenotype(s)
    }

    fn tuples(keys: &crate::crypto::KeySet, g: &Keyword, ids: &[u64], rng: &mut ChaCha20Rng) -> Vec<TSetTuple> {
        let k_e = prf_f(&keys.k_s, &g.encode());
        ids.iter()
            .map(|&id| TSetTuple {
                y: Scalar::from_u64(id * 1000 + 1),
                id_ct: sym_encrypt(&k_e, id, rng).unwrap(),
            })
            .collect()
    }

    #[test]
    fn gettag_is_deterministic_and_distinct() {
        let keys = keygen(128, &mut ChaCha20Rng::seed_from_u64(0)).unwrap();
        let cc = Keyword::snp(2, "CC".parse::<Genotype>().unwrap());
        let ct = Keyword::snp(2, "CT".parse::<Genotype>().unwrap());
        assert_eq!(tset_gettag(&keys.k_t, &cc), tset_gettag(&keys.k_t, &cc));
        assert_ne!(tset_gettag(&keys.k_t, &cc), tset_gettag(&keys.k_t, &ct));
    }

    #[test]
    fn retrieve_returns_counter_order() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let keys = keygen(128, &mut rng).unwrap();
        let a = kw("A");
        let b = kw("B");
        let ta = tuples(&keys, &a, &[1, 3, 6], &mut rng);
        let tb = tuples(&keys, &b, &[2], &mut rng);
        let tset = tset_setup(&keys.k_t, [(&a, ta.as_slice()), (&b, tb.as_slice())]).unwrap();
        assert_eq!(tset.len(), 4);
        assert_eq!(tset_retrieve(&tset, &tset_gettag(&keys.k_t, &a)).unwrap(), ta);
        assert_eq!(tset_retrieve(&tset, &tset_gettag(&keys.k_t, &b)).unwrap(), tb);
        assert!(tset_retrieve(&tset, &tset_gettag(&keys.k_t, &kw("C"))).unwrap().is_empty());
    }

    #[test]
    fn labels_hide_keyword_and_payloads_are_masked() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let keys = keygen(128, &mut rng).unwrap();
        let a = kw("A");
        let ta = tuples(&keys, &a, &[1], &mut rng);
        let tset = tset_setup(&keys.k_t, [(&a, ta.as_slice())]).unwrap();
        let (_, payload) = tset.entries().next().unwrap();
        assert_ne!(&payload[..32], &ta[0].y.to_bytes());
        assert_ne!(&payload[32..32 + ENCRYPTED_ID_LEN], ta[0].id_ct.as_bytes());
    }

    #[test]
    fn tampered_payload_is_detected() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let keys = keygen(128, &mut rng).unwrap();
        let a = kw("A");
        let ta = tuples(&keys, &a, &[5, 9], &mut rng);
        let tset = tset_setup(&keys.k_t, [(&a, ta.as_slice())]).unwrap();
        let stag = tset_gettag(&keys.k_t, &a);
        // Flip the continuation byte of every entry to a non-boolean value.
        let mut broken = tset.clone();
        for i in 0..broken.len() {
            broken.payloads[(i + 1) * PAYLOAD_LEN - 1] ^= 0x80;
        }
        assert!(matches!(tset_retrieve(&broken, &stag), Err(IndexError::Corrupt(_))));
        // Drop the last entry: the list ends early.
        let mut entries: Vec<(Vec<u8>, Vec<u8>)> =
            tset.entries().map(|(l, p)| (l.to_vec(), p.to_vec())).collect();
        let mut lab2 = vec![0u8; 16];
        label(&stag, 2, &mut lab2);
        entries.retain(|(l, _)| l != &lab2);
        let truncated = TSet::from_sorted(
            16,
            PAYLOAD_LEN,
            entries.iter().flat_map(|(l, _)| l.clone()).collect(),
            entries.iter().flat_map(|(_, p)| p.clone()).collect(),
        )
        .unwrap();
        assert!(matches!(tset_retrieve(&truncated, &stag), Err(IndexError::Corrupt(_))));
    }

    #[test]
    fn distinct_keywords_never_share_labels() {
        // 10^4 random small databases, each keyword list up to 8 long.
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let mut k = [0u8; 16];
            rng.fill(&mut k);
            let k_t = Key::from_bytes(&k).unwrap();
            let n_kw = rng.gen_range(2..6);
            let mut seen = std::collections::HashSet::new();
            for w in 0..n_kw {
                let stag = tset_gettag(&k_t, &kw(&format!("w{w}")));
                for c in 1..=rng.gen_range(1..8u64) {
                    let mut lab = vec![0u8; 16];
                    label(&stag, c, &mut lab);
                    assert!(seen.insert(lab));
                }
            }
        }
    }

    #[test]
    fn from_sorted_rejects_unsorted() {
        let labels = [[2u8; 16], [1u8; 16]].concat();
        let payloads = vec![0u8; 2 * PAYLOAD_LEN];
        assert!(TSet::from_sorted(16, PAYLOAD_LEN, labels, payloads).is_err());
    }
}
