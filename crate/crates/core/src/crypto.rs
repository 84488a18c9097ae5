//! Symmetric crypto provider: AEAD, labelled KDF and randomness sources.
//!
//! The overlay only ever needs three primitives: an AEAD for every
//! protected message, a KDF for link, binding and end-to-end keys, and a
//! random source for nonces, seeds and master keys. They sit behind
//! [`CryptoProvider`] and [`RandomSource`] so the simulator can pin a
//! deterministic stream while a deployment plugs in the OS generator.
//!
//! The default suite is ChaCha20-Poly1305 (RFC 8439) with HKDF-SHA256
//! (RFC 5869).

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use chacha20poly1305::aead::{Aead, Payload};
use chacha20poly1305::{ChaCha20Poly1305, KeyInit};
use hkdf::Hkdf;
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const SEED_LEN: usize = 16;
pub const TAG_LEN: usize = 16;

/// Suite identifier of [`ChaChaHkdf`].
pub const DEFAULT_SUITE: &str = "chacha20poly1305-hkdf-sha256";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("authentication failed")]
    Auth,
    #[error("unknown kdf label {0:?}")]
    LabelUnknown(String),
    #[error("kdf context part {index} is {len} bytes (max 65535)")]
    ContextTooLong { index: usize, len: usize },
    #[error("expected {expected} bytes, got {actual}")]
    BadLength { expected: usize, actual: usize },
}

/// 32 bytes of secret key material. Zeroized on drop, redacted in `Debug`.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct SymKey([u8; KEY_LEN]);

impl SymKey {
    pub const fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; KEY_LEN] =
            bytes.try_into().map_err(|_| CryptoError::BadLength { expected: KEY_LEN, actual: bytes.len() })?;
        Ok(Self(arr))
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for SymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymKey(..)")
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Nonce(pub [u8; NONCE_LEN]);

impl fmt::Debug for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonce({})", hex::encode(self.0))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seed(pub [u8; SEED_LEN]);

impl fmt::Debug for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Seed({})", hex::encode(self.0))
    }
}

/// Ciphertext followed by the 16-byte tag.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AeadBox(pub Vec<u8>);

impl AeadBox {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }
}

/// KDF domain-separation labels. The set is closed.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum KdfLabel {
    Link,
    Bind,
    E2e,
    HeadHead,
}

impl KdfLabel {
    pub const ALL: [KdfLabel; 4] = [KdfLabel::Link, KdfLabel::Bind, KdfLabel::E2e, KdfLabel::HeadHead];

    pub fn as_str(self) -> &'static str {
        match self {
            KdfLabel::Link => "link-v1",
            KdfLabel::Bind => "bind-v1",
            KdfLabel::E2e => "e2e-v1",
            KdfLabel::HeadHead => "hh-v1",
        }
    }
}

impl FromStr for KdfLabel {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KdfLabel::ALL.into_iter().find(|l| l.as_str() == s).ok_or_else(|| CryptoError::LabelUnknown(s.to_owned()))
    }
}

impl fmt::Display for KdfLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Builds the KDF `info` string: `len(label) u8 | label | (u16-BE len | part)*`.
pub fn kdf_info(label: KdfLabel, context: &[&[u8]]) -> Result<Vec<u8>, CryptoError> {
    let label = label.as_str().as_bytes();
    let total: usize = context.iter().map(|p| p.len() + 2).sum();
    let mut info = Vec::with_capacity(1 + label.len() + total);
    info.push(label.len() as u8);
    info.extend_from_slice(label);
    for (index, part) in context.iter().enumerate() {
        let len = u16::try_from(part.len()).map_err(|_| CryptoError::ContextTooLong { index, len: part.len() })?;
        info.extend_from_slice(&len.to_be_bytes());
        info.extend_from_slice(part);
    }
    Ok(info)
}

pub trait CryptoProvider: Send + Sync {
    fn suite_id(&self) -> &str;

    fn seal(&self, key: &SymKey, nonce: &Nonce, aad: &[u8], plaintext: &[u8]) -> AeadBox;

    fn open(&self, key: &SymKey, nonce: &Nonce, aad: &[u8], sealed: &[u8]) -> Result<Vec<u8>, CryptoError>;

    fn kdf(&self, ikm: &[u8], label: KdfLabel, context: &[&[u8]]) -> Result<SymKey, CryptoError>;
}

/// ChaCha20-Poly1305 + HKDF-SHA256 (unsalted extract, info from [`kdf_info`]).
#[derive(Debug, Default, Clone, Copy)]
pub struct ChaChaHkdf;

impl CryptoProvider for ChaChaHkdf {
    fn suite_id(&self) -> &str {
        DEFAULT_SUITE
    }

    fn seal(&self, key: &SymKey, nonce: &Nonce, aad: &[u8], plaintext: &[u8]) -> AeadBox {
        let cipher = ChaCha20Poly1305::new(key.as_bytes().into());
        let out = cipher
            .encrypt(&nonce.0.into(), Payload { msg: plaintext, aad })
            .expect("chacha20poly1305 encryption is infallible for in-range lengths");
        AeadBox(out)
    }

    fn open(&self, key: &SymKey, nonce: &Nonce, aad: &[u8], sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if sealed.len() < TAG_LEN {
            return Err(CryptoError::Auth);
        }
        let cipher = ChaCha20Poly1305::new(key.as_bytes().into());
        cipher.decrypt(&nonce.0.into(), Payload { msg: sealed, aad }).map_err(|_| CryptoError::Auth)
    }

    fn kdf(&self, ikm: &[u8], label: KdfLabel, context: &[&[u8]]) -> Result<SymKey, CryptoError> {
        let info = kdf_info(label, context)?;
        let hk = Hkdf::<Sha256>::new(None, ikm);
        let mut okm = [0u8; KEY_LEN];
        hk.expand(&info, &mut okm).expect("32 bytes is a valid HKDF-SHA256 output length");
        let key = SymKey(okm);
        okm.zeroize();
        Ok(key)
    }
}

/// Resolves a suite name to a provider. `"default"` is an alias.
pub fn provider_for_suite(suite_id: &str) -> Option<Arc<dyn CryptoProvider>> {
    match suite_id {
        "default" | DEFAULT_SUITE => Some(Arc::new(ChaChaHkdf)),
        _ => None,
    }
}

pub fn default_provider() -> Arc<dyn CryptoProvider> {
    Arc::new(ChaChaHkdf)
}

/// One recorded KDF invocation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KdfCall {
    pub label: KdfLabel,
    pub context: Vec<Vec<u8>>,
}

/// Wraps a provider and logs every KDF call. Test and audit aid.
pub struct RecordingProvider<P> {
    inner: P,
    calls: Mutex<Vec<KdfCall>>,
}

impl<P: CryptoProvider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, calls: Mutex::new(Vec::new()) }
    }

    pub fn kdf_calls(&self) -> Vec<KdfCall> {
        self.calls.lock().expect("poisoned").clone()
    }
}

impl<P: CryptoProvider> CryptoProvider for RecordingProvider<P> {
    fn suite_id(&self) -> &str {
        self.inner.suite_id()
    }

    fn seal(&self, key: &SymKey, nonce: &Nonce, aad: &[u8], plaintext: &[u8]) -> AeadBox {
        self.inner.seal(key, nonce, aad, plaintext)
    }

    fn open(&self, key: &SymKey, nonce: &Nonce, aad: &[u8], sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
        self.inner.open(key, nonce, aad, sealed)
    }

    fn kdf(&self, ikm: &[u8], label: KdfLabel, context: &[&[u8]]) -> Result<SymKey, CryptoError> {
        self.calls
            .lock()
            .expect("poisoned")
            .push(KdfCall { label, context: context.iter().map(|p| p.to_vec()).collect() });
        self.inner.kdf(ikm, label, context)
    }
}

pub trait RandomSource {
    fn fill(&mut self, out: &mut [u8]);

    fn random_nonce(&mut self) -> Nonce {
        let mut n = [0u8; NONCE_LEN];
        self.fill(&mut n);
        Nonce(n)
    }

    fn random_seed(&mut self) -> Seed {
        let mut s = [0u8; SEED_LEN];
        self.fill(&mut s);
        Seed(s)
    }

    fn random_key(&mut self) -> SymKey {
        let mut k = [0u8; KEY_LEN];
        self.fill(&mut k);
        let key = SymKey(k);
        k.zeroize();
        key
    }

    fn random_array<const N: usize>(&mut self) -> [u8; N]
    where
        Self: Sized,
    {
        let mut a = [0u8; N];
        self.fill(&mut a);
        a
    }
}

/// Counter-mode deterministic generator: block `i` is
/// `SHA-256("hierakey-rng" | seed | i)`. Not for production keys.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DetRng {
    seed: [u8; 8],
    counter: u64,
    block: [u8; 32],
    used: usize,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        Self::from_seed_bytes(seed.to_be_bytes())
    }

    pub fn from_seed_bytes(seed: [u8; 8]) -> Self {
        Self { seed, counter: 0, block: [0; 32], used: 32 }
    }

    /// Child generator for a named sub-stream (e.g. one per entity).
    pub fn derive(seed: u64, stream: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"hierakey-rng-stream");
        h.update(seed.to_be_bytes());
        h.update(stream.as_bytes());
        let digest = h.finalize();
        let mut s = [0u8; 8];
        s.copy_from_slice(&digest[..8]);
        Self::from_seed_bytes(s)
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    fn refill(&mut self) {
        let mut h = Sha256::new();
        h.update(b"hierakey-rng");
        h.update(self.seed);
        h.update(self.counter.to_be_bytes());
        self.block.copy_from_slice(&h.finalize());
        self.counter += 1;
        self.used = 0;
    }
}

impl RandomSource for DetRng {
    fn fill(&mut self, out: &mut [u8]) {
        let mut written = 0;
        while written < out.len() {
            if self.used == self.block.len() {
                self.refill();
            }
            let take = (self.block.len() - self.used).min(out.len() - written);
            out[written..written + take].copy_from_slice(&self.block[self.used..self.used + take]);
            self.used += take;
            written += take;
        }
    }
}

/// Operating-system randomness.
#[derive(Debug, Default, Clone, Copy)]
pub struct OsRandom;

impl RandomSource for OsRandom {
    fn fill(&mut self, out: &mut [u8]) {
        getrandom::fill(out).expect("operating system random source unavailable");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn p() -> ChaChaHkdf {
        ChaChaHkdf
    }

    #[test]
    fn empty_plaintext_seals_to_tag_only() {
        let k = SymKey::from_bytes([7; 32]);
        let b = p().seal(&k, &Nonce([1; 12]), b"aad", b"");
        assert_eq!(b.0.len(), 16);
    }

    #[test]
    fn sealed_length_is_plaintext_plus_tag() {
        let k = SymKey::from_bytes([7; 32]);
        let b = p().seal(&k, &Nonce([1; 12]), b"aad", &[0x55; 32]);
        assert_eq!(b.0.len(), 48);
    }

    // RFC 8439 section 2.8.2.
    #[test]
    fn rfc8439_aead_vector() {
        let key: Vec<u8> = (0x80u8..0xa0).collect();
        let key = SymKey::from_slice(&key).unwrap();
        let nonce = Nonce(hex::decode("070000004041424344454647").unwrap().try_into().unwrap());
        let aad = hex::decode("50515253c0c1c2c3c4c5c6c7").unwrap();
        let pt = b"Ladies and Gentlemen of the class of '99: If I could offer you only one tip for the future, sunscreen would be it.";
        let expected = "d31a8d34648e60db7b86afbc53ef7ec2a4aded51296e08fea9e2b5a736ee62d63dbea45e8ca9671282fafb69da92728b1a71de0a9e060b2905d6a5b67ecd3b3692ddbd7f2d778b8c9803aee328091b58fab324e4fad675945585808b4831d7bc3ff4def08e4b7a9de576d26586cec64b61161ae10b594f09e26a7e902ecbd0600691";
        let sealed = p().seal(&key, &nonce, &aad, pt);
        assert_eq!(hex::encode(&sealed.0), expected);
        assert_eq!(p().open(&key, &nonce, &aad, &sealed.0).unwrap(), pt.to_vec());
    }

    // Frozen from an independent ChaCha20-Poly1305 implementation.
    #[test]
    fn zero_key_zero_nonce_abc_aad() {
        let k = SymKey::from_bytes([0; 32]);
        let n = Nonce([0; 12]);
        assert_eq!(hex::encode(p().seal(&k, &n, b"abc", b"").0), "e75e31de88e480eed5423753250b17a0");
        assert_eq!(hex::encode(p().seal(&k, &n, b"abc", b"hi").0), "f76e86ef1e1c49df08307df849d70d47d568");
    }

    #[test]
    fn open_rejects_flipped_bit_and_wrong_aad() {
        let k = SymKey::from_bytes([3; 32]);
        let n = Nonce([9; 12]);
        let mut b = p().seal(&k, &n, b"hdr", b"payload").0;
        assert_eq!(p().open(&k, &n, b"hdr2", &b), Err(CryptoError::Auth));
        b[2] ^= 0x10;
        assert_eq!(p().open(&k, &n, b"hdr", &b), Err(CryptoError::Auth));
        assert_eq!(p().open(&k, &n, b"hdr", &[0u8; 15]), Err(CryptoError::Auth));
    }

    // Frozen from an independent HKDF-SHA256 over the same info encoding.
    #[test]
    fn kdf_vectors() {
        let k = p().kdf(b"ikm", KdfLabel::Link, &[b"a", b"b"]).unwrap();
        assert_eq!(hex::encode(k.as_bytes()), "733a9e05e3ea2423308e7486ecf1d8d0881aee9fc82f614a568b85484170a526");
        let k = p().kdf(&[0; 32], KdfLabel::Bind, &[]).unwrap();
        assert_eq!(hex::encode(k.as_bytes()), "c39cbb3537d3680565a727539c8912d0ed0e03ae29f25736e5152e25de093795");
        let ikm: Vec<u8> = (0u8..32).collect();
        let k = p().kdf(&ikm, KdfLabel::E2e, &[b"x", b""]).unwrap();
        assert_eq!(hex::encode(k.as_bytes()), "56f5df33eb388683ca682976ac3071036fc88b84d54c77c17e15c077c1798f97");
    }

    #[test]
    fn kdf_context_is_unambiguous() {
        let a = p().kdf(b"ikm", KdfLabel::Link, &[b"ab", b"c"]).unwrap();
        let b = p().kdf(b"ikm", KdfLabel::Link, &[b"a", b"bc"]).unwrap();
        assert_ne!(a, b);
        let c = p().kdf(b"ikm", KdfLabel::E2e, &[b"ab", b"c"]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn kdf_rejects_oversized_part() {
        let big = vec![0u8; 65536];
        assert_eq!(
            p().kdf(b"ikm", KdfLabel::Link, &[b"ok", &big]),
            Err(CryptoError::ContextTooLong { index: 1, len: 65536 })
        );
        assert!(p().kdf(b"ikm", KdfLabel::Link, &[&big[..65535]]).is_ok());
    }

    #[test]
    fn label_parsing() {
        assert_eq!("hh-v1".parse::<KdfLabel>().unwrap(), KdfLabel::HeadHead);
        assert_eq!("tls13".parse::<KdfLabel>(), Err(CryptoError::LabelUnknown("tls13".into())));
    }

    #[test]
    fn det_rng_stream() {
        let mut a = DetRng::new(42);
        let mut b = DetRng::new(42);
        let first = a.random_nonce();
        assert_eq!(first, b.random_nonce());
        assert_ne!(first, a.random_nonce());
        assert!(a.counter() > 0);
        assert_ne!(DetRng::new(43).random_nonce(), DetRng::new(42).random_nonce());
    }

    #[test]
    fn det_rng_thousand_seeds_unique() {
        let mut r = DetRng::new(7);
        let seen: HashSet<_> = (0..1000).map(|_| r.random_seed()).collect();
        assert_eq!(seen.len(), 1000);
    }

    #[test]
    fn derived_streams_differ() {
        assert_ne!(DetRng::derive(1, "N1").random_key(), DetRng::derive(1, "N2").random_key());
        assert_eq!(DetRng::derive(1, "N1").random_key(), DetRng::derive(1, "N1").random_key());
    }

    #[test]
    fn os_random_fills() {
        let mut r = OsRandom;
        assert_ne!(r.random_key(), r.random_key());
    }

    #[test]
    fn key_debug_is_redacted() {
        assert_eq!(format!("{:?}", SymKey::from_bytes([1; 32])), "SymKey(..)");
    }

    #[test]
    fn recording_provider_logs_context() {
        let rp = RecordingProvider::new(ChaChaHkdf);
        rp.kdf(b"k", KdfLabel::Bind, &[b"n1", b"ch1"]).unwrap();
        assert_eq!(
            rp.kdf_calls(),
            vec![KdfCall { label: KdfLabel::Bind, context: vec![b"n1".to_vec(), b"ch1".to_vec()] }]
        );
    }
}
