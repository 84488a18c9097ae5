//! Keystore file for heads and mediators.
//!
//! ```text
//! "HKKS" | version u8 | entry_count u32 | entry* | peer_count u32 | peer* | digest[32]
//! entry = id | role u8 | registrar id | status u8 | key_present u8 | key[32]? | assoc_count u8 | id*
//! peer  = id_a | id_b | key[32]          (id_a < id_b)
//! id    = u16 len | UTF-8
//! ```
//!
//! The digest is the provider KDF under label `hh-v1` keyed with 32 zero
//! bytes, over everything before it split into 65535-byte context parts.
//! Integrity only; keys are stored in the clear.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{EntityId, RegistryEntry, Role, Status};
use crate::crypto::{CryptoProvider, KdfLabel, SymKey, KEY_LEN};

pub const MAGIC: &[u8; 4] = b"HKKS";
pub const VERSION: u8 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported keystore version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated keystore")]
    Truncated,
    #[error("integrity digest mismatch")]
    ChecksumMismatch,
    #[error("trailing bytes after keystore body")]
    TrailingBytes,
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("unknown crypto suite {0:?}")]
    UnknownSuite(String),
    #[error("too many items to encode: {0}")]
    TooLarge(String),
}

#[derive(Debug, Error)]
pub enum KeystoreError {
    #[error("keystore i/o: {0}")]
    Io(#[from] io::Error),
    #[error("keystore format: {0}")]
    Format(#[from] FormatError),
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct KeystoreContents {
    pub entries: Vec<RegistryEntry>,
    pub peer_keys: Vec<(EntityId, EntityId, SymKey)>,
}

fn digest(provider: &dyn CryptoProvider, data: &[u8]) -> [u8; DIGEST_LEN] {
    let parts: Vec<&[u8]> = data.chunks(u16::MAX as usize).collect();
    let key = provider.kdf(&[0u8; KEY_LEN], KdfLabel::HeadHead, &parts).expect("chunks fit the context part limit");
    *key.as_bytes()
}

fn put_id(out: &mut Vec<u8>, id: &str) {
    out.extend_from_slice(&(id.len() as u16).to_be_bytes());
    out.extend_from_slice(id.as_bytes());
}

pub fn encode_keystore(provider: &dyn CryptoProvider, contents: &KeystoreContents) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let count = u32::try_from(contents.entries.len()).map_err(|_| FormatError::TooLarge("entries".into()))?;
    out.extend_from_slice(&count.to_be_bytes());
    for e in &contents.entries {
        put_id(&mut out, e.id.as_str());
        out.push(e.role.code());
        put_id(&mut out, e.registrar.as_ref().map_or("", EntityId::as_str));
        out.push(e.status.code());
        match &e.master_key {
            Some(k) => {
                out.push(1);
                out.extend_from_slice(k.as_bytes());
            }
            None => out.push(0),
        }
        let n = u8::try_from(e.associated_chs.len())
            .map_err(|_| FormatError::TooLarge(format!("associations of {}", e.id)))?;
        out.push(n);
        for ch in &e.associated_chs {
            put_id(&mut out, ch.as_str());
        }
    }
    let peers = u32::try_from(contents.peer_keys.len()).map_err(|_| FormatError::TooLarge("peers".into()))?;
    out.extend_from_slice(&peers.to_be_bytes());
    for (a, b, k) in &contents.peer_keys {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        put_id(&mut out, a.as_str());
        put_id(&mut out, b.as_str());
        out.extend_from_slice(k.as_bytes());
    }
    let d = digest(provider, &out);
    out.extend_from_slice(&d);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn raw_id(&mut self) -> Result<&'a str, FormatError> {
        let n = self.u16()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| FormatError::InvalidField("id is not UTF-8".into()))
    }

    fn id(&mut self) -> Result<EntityId, FormatError> {
        let s = self.raw_id()?;
        EntityId::new(s).map_err(|e| FormatError::InvalidField(e.to_string()))
    }

    fn key(&mut self) -> Result<SymKey, FormatError> {
        Ok(SymKey::from_slice(self.take(KEY_LEN)?).expect("exact length"))
    }
}

pub fn decode_keystore(provider: &dyn CryptoProvider, bytes: &[u8]) -> Result<KeystoreContents, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < 5 {
        return Err(FormatError::Truncated);
    }
    if bytes[4] != VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]));
    }
    if bytes.len() < 5 + 4 + 4 + DIGEST_LEN {
        return Err(FormatError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if digest(provider, body) != tail {
        return Err(FormatError::ChecksumMismatch);
    }

    let mut r = Reader { buf: body, pos: 5 };
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let id = r.id()?;
        let role = Role::from_code(r.u8()?).ok_or_else(|| FormatError::InvalidField("role".into()))?;
        let registrar = match r.raw_id()? {
            "" => None,
            s => Some(EntityId::new(s).map_err(|e| FormatError::InvalidField(e.to_string()))?),
        };
        let status = match r.u8()? {
            0 => Status::Active,
            1 => Status::Revoked,
            _ => return Err(FormatError::InvalidField("status".into())),
        };
        let master_key = match r.u8()? {
            0 => None,
            1 => Some(r.key()?),
            _ => return Err(FormatError::InvalidField("key flag".into())),
        };
        let n = r.u8()?;
        let mut associated_chs = Vec::with_capacity(n as usize);
        for _ in 0..n {
            associated_chs.push(r.id()?);
        }
        entries.push(RegistryEntry { id, role, registrar, master_key, status, associated_chs });
    }
    let peers = r.u32()?;
    let mut peer_keys = Vec::new();
    for _ in 0..peers {
        let a = r.id()?;
        let b = r.id()?;
        if a >= b {
            return Err(FormatError::InvalidField("peer ids out of order".into()));
        }
        peer_keys.push((a, b, r.key()?));
    }
    if r.pos != body.len() {
        return Err(FormatError::TrailingBytes);
    }
    Ok(KeystoreContents { entries, peer_keys })
}

pub fn write_keystore(
    path: &Path,
    provider: &dyn CryptoProvider,
    contents: &KeystoreContents,
) -> Result<(), KeystoreError> {
    let bytes = encode_keystore(provider, contents)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_keystore(path: &Path, provider: &dyn CryptoProvider) -> Result<KeystoreContents, KeystoreError> {
    let bytes = fs::read(path)?;
    Ok(decode_keystore(provider, &bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{ChaChaHkdf, DetRng};
    use crate::hierarchy::{ta_setup, Topology};

    fn id(s: &str) -> EntityId {
        EntityId::new(s).unwrap()
    }

    fn ten_entities() -> Topology {
        let mut rng = DetRng::new(10);
        let p = ChaChaHkdf;
        let mut t = Topology::new(ta_setup("default", b"d").unwrap());
        t.install_root(id("DM"), Role::DistrictMediator).unwrap();
        for h in ["H1", "H2"] {
            t.register(&id("DM"), id(h), Role::Head, &mut rng).unwrap();
        }
        for (h, ch) in [("H1", "CH1"), ("H1", "CH2"), ("H2", "CH3")] {
            t.register(&id(h), id(ch), Role::ClusterHead, &mut rng).unwrap();
        }
        for (h, n, ch) in [("H1", "N1", "CH1"), ("H1", "N2", "CH2"), ("H2", "N3", "CH3"), ("H2", "N4", "CH3")] {
            t.register(&id(h), id(n), Role::Node, &mut rng).unwrap();
            t.associate(&p, &id(h), &id(n), &id(ch)).unwrap();
        }
        t.associate(&p, &id("H1"), &id("N1"), &id("CH2")).unwrap();
        t.record_peer_key(&id("H2"), &id("H1"), SymKey::from_bytes([4; 32])).unwrap();
        t.revoke(&id("H2"), &id("N4")).unwrap();
        assert_eq!(t.len(), 10);
        t
    }

    #[test]
    fn roundtrip_ten_entities() {
        let t = ten_entities();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ks.bin");
        t.save_keystore(&path).unwrap();
        let back = Topology::load_keystore(&path, t.params().clone()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.get(&id("N4")).unwrap().status, Status::Revoked);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_keystore(&ChaChaHkdf, &KeystoreContents::default()).unwrap();
        assert_eq!(&bytes[..5], b"HKKS\x01");
        assert_eq!(bytes.len(), 5 + 4 + 4 + 32);
        assert_eq!(decode_keystore(&ChaChaHkdf, &bytes).unwrap(), KeystoreContents::default());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = encode_keystore(&ChaChaHkdf, &ten_entities().to_keystore()).unwrap();
        for cut in [0, 3, 5, 20, bytes.len() - 1] {
            assert!(decode_keystore(&ChaChaHkdf, &bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn future_version_is_rejected() {
        let mut bytes = encode_keystore(&ChaChaHkdf, &ten_entities().to_keystore()).unwrap();
        bytes[4] = 2;
        assert_eq!(decode_keystore(&ChaChaHkdf, &bytes), Err(FormatError::UnsupportedVersion(2)));
    }

    #[test]
    fn corrupted_body_fails_checksum() {
        let mut bytes = encode_keystore(&ChaChaHkdf, &ten_entities().to_keystore()).unwrap();
        bytes[12] ^= 1;
        assert_eq!(decode_keystore(&ChaChaHkdf, &bytes), Err(FormatError::ChecksumMismatch));
        bytes[0] = b'X';
        assert_eq!(decode_keystore(&ChaChaHkdf, &bytes), Err(FormatError::BadMagic));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_keystore(Path::new("/nonexistent/ks.bin"), &ChaChaHkdf).unwrap_err();
        assert!(matches!(err, KeystoreError::Io(_)));
    }
}
