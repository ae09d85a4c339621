//! Keyed primitives shared by the trustee, vetter and data server.
//!
//! * `F`   : HMAC-SHA256 truncated to the security parameter.
//! * `F_p` : HMAC-SHA512 reduced modulo the Ristretto255 group order, zero rejected.
//! * group : Ristretto255, canonical 32-byte encodings.
//! * `E`   : AES-GCM with a random 96-bit nonce (AES-128 or AES-256 by key size).

use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::Mul;
use std::path::Path;

use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes128Gcm, Aes256Gcm, Nonce};
use curve25519_dalek::constants::RISTRETTO_BASEPOINT_TABLE;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar as DalekScalar;
use curve25519_dalek::traits::Identity;
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use sha2::{Sha256, Sha512};
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;
type HmacSha512 = Hmac<Sha512>;

/// Wire identifier of the group used for xtags and tokens.
pub const GROUP_RISTRETTO255: u8 = 1;
/// Canonical encoding width of a group element.
pub const ELEMENT_LEN: usize = 32;
/// Canonical encoding width of a scalar.
pub const SCALAR_LEN: usize = 32;
/// Nonce (12) + AES-GCM ciphertext of a u64 ID (8) + tag (16).
pub const ENCRYPTED_ID_LEN: usize = 12 + 8 + 16;

const KEY_FILE_MAGIC: &[u8; 8] = b"PGDBKEY1";

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("unsupported security parameter: {0} bits (expected 128 or 256)")]
    UnsupportedLambda(usize),
    #[error("key generation failed: {0}")]
    KeyGeneration(String),
    #[error("zero has no multiplicative inverse")]
    ZeroInverse,
    #[error("malformed group element encoding")]
    MalformedElement,
    #[error("malformed scalar encoding")]
    MalformedScalar,
    #[error("ciphertext authentication failed")]
    Authentication,
    #[error("encrypted id has length {0}, expected {ENCRYPTED_ID_LEN}")]
    CiphertextLength(usize),
    #[error("key file: {0}")]
    KeyFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Length-prefixed concatenation of PRF input fields.
///
/// Each field is written as a little-endian u32 length followed by its bytes,
/// so distinct field tuples never collide ("CancerB"||12 vs "CancerB1"||2).
pub fn framed(fields: &[&[u8]]) -> Vec<u8> {
    let total = fields.iter().map(|f| 4 + f.len()).sum();
    let mut out = Vec::with_capacity(total);
    for field in fields {
        out.extend_from_slice(&(field.len() as u32).to_le_bytes());
        out.extend_from_slice(field);
    }
    out
}

/// A secret λ-bit key.
#[derive(Clone, PartialEq, Eq)]
pub struct Key(Box<[u8]>);

impl Key {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        match bytes.len() {
            16 | 32 => Ok(Key(bytes.into())),
            n => Err(CryptoError::UnsupportedLambda(n * 8)),
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn lambda(&self) -> usize {
        self.0.len() * 8
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Key({} bits, redacted)", self.lambda())
    }
}

/// The five trustee/vetter keys.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeySet {
    /// Per-keyword ID-encryption keys, via `F`.
    pub k_s: Key,
    /// Keyword component of xtags, via `F_p`.
    pub k_x: Key,
    /// Record blinding `XID`, via `F_p`.
    pub k_i: Key,
    /// Per-position blinding `z`, via `F_p`.
    pub k_z: Key,
    /// TSet tags.
    pub k_t: Key,
}

pub fn keygen<R: RngCore + CryptoRng>(lambda: usize, rng: &mut R) -> Result<KeySet, CryptoError> {
    if lambda != 128 && lambda != 256 {
        return Err(CryptoError::UnsupportedLambda(lambda));
    }
    let mut draw = || -> Result<Key, CryptoError> {
        let mut buf = vec![0u8; lambda / 8];
        rng.try_fill_bytes(&mut buf)
            .map_err(|e| CryptoError::KeyGeneration(e.to_string()))?;
        Ok(Key(buf.into_boxed_slice()))
    };
    Ok(KeySet {
        k_s: draw()?,
        k_x: draw()?,
        k_i: draw()?,
        k_z: draw()?,
        k_t: draw()?,
    })
}

impl KeySet {
    pub fn lambda(&self) -> usize {
        self.k_s.lambda()
    }

    fn keys(&self) -> [&Key; 5] {
        [&self.k_s, &self.k_x, &self.k_i, &self.k_z, &self.k_t]
    }

    /// `PGDBKEY1` followed by the five keys in order (K_S, K_X, K_I, K_Z, K_T).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = KEY_FILE_MAGIC.to_vec();
        for key in self.keys() {
            out.extend_from_slice(key.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let body = bytes
            .strip_prefix(KEY_FILE_MAGIC.as_slice())
            .ok_or_else(|| CryptoError::KeyFile("bad magic".into()))?;
        if body.len() % 5 != 0 {
            return Err(CryptoError::KeyFile(format!("bad length {}", bytes.len())));
        }
        let width = body.len() / 5;
        let mut keys = body
            .chunks_exact(width)
            .map(Key::from_bytes)
            .collect::<Result<Vec<_>, _>>()?
            .into_iter();
        let mut next = || keys.next().expect("five chunks");
        Ok(KeySet {
            k_s: next(),
            k_x: next(),
            k_i: next(),
            k_z: next(),
            k_t: next(),
        })
    }

    /// Writes the key file, readable by the owner only.
    pub fn write_file(&self, path: &Path) -> Result<(), CryptoError> {
        let mut options = fs::OpenOptions::new();
        options.write(true).create(true).truncate(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            options.mode(0o600);
        }
        let mut file = options.open(path)?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            file.set_permissions(fs::Permissions::from_mode(0o600))?;
        }
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, CryptoError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Output of `F`: a λ-bit string.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PrfOutput(Box<[u8]>);

impl PrfOutput {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        PrfOutput(bytes.into())
    }
}

impl fmt::Debug for PrfOutput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrfOutput(")?;
        for b in self.0.iter() {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

/// `F(key, input)`: HMAC-SHA256 truncated to the key's length.
pub fn prf_f(key: &Key, input: &[u8]) -> PrfOutput {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key.as_bytes()).expect("hmac accepts any key length");
    mac.update(input);
    let digest = mac.finalize().into_bytes();
    PrfOutput(digest[..key.as_bytes().len()].into())
}

/// `F_p(key, input)`: a uniform non-zero scalar.
pub fn prf_fp(key: &Key, input: &[u8]) -> Scalar {
    let mut counter = 0u8;
    loop {
        let mut mac =
            <HmacSha512 as Mac>::new_from_slice(key.as_bytes()).expect("hmac accepts any key length");
        mac.update(input);
        mac.update(&[counter]);
        let wide: [u8; 64] = mac.finalize().into_bytes().into();
        let s = DalekScalar::from_bytes_mod_order_wide(&wide);
        if s != DalekScalar::ZERO {
            return Scalar(s);
        }
        counter = counter.wrapping_add(1);
    }
}

/// An element of Z_p, p the Ristretto255 group order.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Scalar(pub(crate) DalekScalar);

impl Scalar {
    pub const ZERO: Scalar = Scalar(DalekScalar::ZERO);
    pub const ONE: Scalar = Scalar(DalekScalar::ONE);

    pub fn from_u64(v: u64) -> Self {
        Scalar(DalekScalar::from(v))
    }

    /// Uniform over Z_p*.
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        loop {
            let s = DalekScalar::random(rng);
            if s != DalekScalar::ZERO {
                return Scalar(s);
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.0 == DalekScalar::ZERO
    }

    pub fn to_bytes(&self) -> [u8; SCALAR_LEN] {
        self.0.to_bytes()
    }

    pub fn from_canonical_bytes(bytes: [u8; SCALAR_LEN]) -> Result<Self, CryptoError> {
        Option::from(DalekScalar::from_canonical_bytes(bytes))
            .map(Scalar)
            .ok_or(CryptoError::MalformedScalar)
    }
}

impl Mul for Scalar {
    type Output = Scalar;
    fn mul(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 * rhs.0)
    }
}

impl fmt::Debug for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Scalar(")?;
        for b in self.to_bytes().iter().rev() {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

pub fn scalar_inverse(z: Scalar) -> Result<Scalar, CryptoError> {
    if z.is_zero() {
        return Err(CryptoError::ZeroInverse);
    }
    Ok(Scalar(z.0.invert()))
}

/// Inverts every scalar in place with a single field inversion.
pub fn batch_inverse(scalars: &mut [Scalar]) -> Result<(), CryptoError> {
    if scalars.iter().any(Scalar::is_zero) {
        return Err(CryptoError::ZeroInverse);
    }
    let mut inner: Vec<DalekScalar> = scalars.iter().map(|s| s.0).collect();
    DalekScalar::batch_invert(&mut inner);
    for (dst, src) in scalars.iter_mut().zip(inner) {
        dst.0 = src;
    }
    Ok(())
}

/// A group element in canonical compressed form.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement([u8; ELEMENT_LEN]);

impl GroupElement {
    pub fn identity() -> Self {
        GroupElement(RistrettoPoint::identity().compress().to_bytes())
    }

    pub fn generator() -> Self {
        base_pow(Scalar::ONE)
    }

    /// Accepts only canonical encodings of subgroup elements.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; ELEMENT_LEN] = bytes.try_into().map_err(|_| CryptoError::MalformedElement)?;
        let element = GroupElement(arr);
        element.decode()?;
        Ok(element)
    }

    pub fn as_bytes(&self) -> &[u8; ELEMENT_LEN] {
        &self.0
    }

    fn decode(&self) -> Result<RistrettoPoint, CryptoError> {
        CompressedRistretto(self.0)
            .decompress()
            .ok_or(CryptoError::MalformedElement)
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupElement(")?;
        for b in &self.0[..8] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

/// `h^e` for the fixed generator `h`.
pub fn base_pow(e: Scalar) -> GroupElement {
    GroupElement((&e.0 * RISTRETTO_BASEPOINT_TABLE).compress().to_bytes())
}

/// `elem^e`.
pub fn group_pow(elem: &GroupElement, e: Scalar) -> Result<GroupElement, CryptoError> {
    let point = elem.decode()?;
    Ok(GroupElement((point * e.0).compress().to_bytes()))
}

/// A record ID encrypted under a per-keyword key: nonce || ciphertext || tag.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncryptedId([u8; ENCRYPTED_ID_LEN]);

impl EncryptedId {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        bytes
            .try_into()
            .map(EncryptedId)
            .map_err(|_| CryptoError::CiphertextLength(bytes.len()))
    }

    pub fn as_bytes(&self) -> &[u8; ENCRYPTED_ID_LEN] {
        &self.0
    }
}

impl fmt::Debug for EncryptedId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EncryptedId(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

enum IdCipher {
    Aes128(Box<Aes128Gcm>),
    Aes256(Box<Aes256Gcm>),
}

impl IdCipher {
    fn new(key: &[u8]) -> Result<Self, CryptoError> {
        match key.len() {
            16 => Ok(IdCipher::Aes128(Box::new(Aes128Gcm::new_from_slice(key).expect("16-byte key")))),
            32 => Ok(IdCipher::Aes256(Box::new(Aes256Gcm::new_from_slice(key).expect("32-byte key")))),
            n => Err(CryptoError::UnsupportedLambda(n * 8)),
        }
    }

    fn encrypt(&self, nonce: &[u8; 12], plaintext: &[u8]) -> Vec<u8> {
        let nonce = Nonce::from_slice(nonce);
        match self {
            IdCipher::Aes128(c) => c.encrypt(nonce, plaintext),
            IdCipher::Aes256(c) => c.encrypt(nonce, plaintext),
        }
        .expect("AES-GCM encryption of 8 bytes cannot fail")
    }

    fn decrypt(&self, nonce: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let nonce = Nonce::from_slice(nonce);
        match self {
            IdCipher::Aes128(c) => c.decrypt(nonce, ciphertext),
            IdCipher::Aes256(c) => c.decrypt(nonce, ciphertext),
        }
        .map_err(|_| CryptoError::Authentication)
    }
}

/// Encrypts many IDs under one key without re-expanding the AES key schedule.
pub struct IdSealer(IdCipher);

impl IdSealer {
    pub fn new(k_e: &PrfOutput) -> Result<Self, CryptoError> {
        IdCipher::new(k_e.as_bytes()).map(IdSealer)
    }

    pub fn seal<R: RngCore + CryptoRng>(&self, id: u64, rng: &mut R) -> EncryptedId {
        let mut nonce = [0u8; 12];
        rng.fill_bytes(&mut nonce);
        let ct = self.0.encrypt(&nonce, &id.to_le_bytes());
        let mut out = [0u8; ENCRYPTED_ID_LEN];
        out[..12].copy_from_slice(&nonce);
        out[12..].copy_from_slice(&ct);
        EncryptedId(out)
    }

    pub fn open(&self, ct: &EncryptedId) -> Result<u64, CryptoError> {
        let pt = self.0.decrypt(&ct.0[..12], &ct.0[12..])?;
        let bytes: [u8; 8] = pt.as_slice().try_into().map_err(|_| CryptoError::Authentication)?;
        Ok(u64::from_le_bytes(bytes))
    }
}

pub fn sym_encrypt<R: RngCore + CryptoRng>(
    k_e: &PrfOutput,
    id: u64,
    rng: &mut R,
) -> Result<EncryptedId, CryptoError> {
    Ok(IdSealer::new(k_e)?.seal(id, rng))
}

pub fn sym_decrypt(k_e: &PrfOutput, ct: &EncryptedId) -> Result<u64, CryptoError> {
    IdSealer::new(k_e)?.open(ct)
}
