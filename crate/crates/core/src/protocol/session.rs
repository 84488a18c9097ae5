use crate::crypto::{CryptoProvider, KdfLabel, Nonce, Seed, SymKey};
use crate::hierarchy::EntityId;
use crate::wire::{self, Body, ExchangeId, MsgType, WireMessage};

use super::{link_nonce, ProtocolError, DIR_DOWN, DIR_UP};

/// `KDF(shared, "link-v1", [child, parent, nonce_c, nonce_p, seed_c, seed_p, label])`.
#[allow(clippy::too_many_arguments)]
pub fn derive_link_key(
    provider: &dyn CryptoProvider,
    shared: &SymKey,
    child: &EntityId,
    parent: &EntityId,
    nonce_c: &Nonce,
    nonce_p: &Nonce,
    seed_c: &Seed,
    seed_p: &Seed,
    deployment_label: &[u8],
) -> Result<SymKey, ProtocolError> {
    Ok(provider.kdf(
        shared.as_bytes(),
        KdfLabel::Link,
        &[child.as_bytes(), parent.as_bytes(), &nonce_c.0, &nonce_p.0, &seed_c.0, &seed_p.0, deployment_label],
    )?)
}

/// `KDF(seed_i || seed_r, "e2e-v1", [initiator, responder, exchange_id, nonce_i, nonce_r, label])`.
#[allow(clippy::too_many_arguments)]
pub fn derive_e2e_key(
    provider: &dyn CryptoProvider,
    seed_i: &Seed,
    seed_r: &Seed,
    initiator: &EntityId,
    responder: &EntityId,
    exchange_id: &ExchangeId,
    nonce_i: &Nonce,
    nonce_r: &Nonce,
    deployment_label: &[u8],
) -> Result<SymKey, ProtocolError> {
    let ikm = [&seed_i.0[..], &seed_r.0].concat();
    Ok(provider.kdf(
        &ikm,
        KdfLabel::E2e,
        &[initiator.as_bytes(), responder.as_bytes(), exchange_id, &nonce_i.0, &nonce_r.0, deployment_label],
    )?)
}

/// Head-to-head link key distilled from a completed end-to-end exchange.
pub fn derive_head_link_key(
    provider: &dyn CryptoProvider,
    e2e: &SymKey,
    a: &EntityId,
    b: &EntityId,
    deployment_label: &[u8],
) -> Result<SymKey, ProtocolError> {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    Ok(provider.kdf(e2e.as_bytes(), KdfLabel::HeadHead, &[lo.as_bytes(), hi.as_bytes(), deployment_label])?)
}

/// Sequenced AEAD channel: nonce = `link_nonce(direction, seq)`, AAD = header.
#[derive(Clone, Debug)]
struct Channel {
    self_id: EntityId,
    peer_id: EntityId,
    key: SymKey,
    send_dir: u32,
    recv_dir: u32,
    /// Next sequence number to send.
    send_seq: u64,
    /// Highest sequence number accepted so far.
    recv_seq: u64,
}

impl Channel {
    fn new(self_id: EntityId, peer_id: EntityId, key: SymKey, send_dir: u32) -> Self {
        let recv_dir = if send_dir == DIR_UP { DIR_DOWN } else { DIR_UP };
        Self { self_id, peer_id, key, send_dir, recv_dir, send_seq: 1, recv_seq: 0 }
    }

    fn seal(
        &mut self,
        provider: &dyn CryptoProvider,
        msg_type: MsgType,
        plaintext: &[u8],
    ) -> Result<Vec<u8>, ProtocolError> {
        let seq = self.send_seq;
        let header = wire::WireHeader { msg_type, sender: self.self_id.clone(), receiver: self.peer_id.clone(), seq };
        let aad = wire::aad_of(&header);
        let sealed = provider.seal(&self.key, &link_nonce(self.send_dir, seq), &aad, plaintext);
        let body = Body::with_ciphertext(msg_type, sealed.into_bytes())
            .ok_or_else(|| ProtocolError::Unexpected(format!("{} has no ciphertext", msg_type.name())))?;
        let bytes = wire::encode(&WireMessage { header, body })?;
        self.send_seq += 1;
        Ok(bytes)
    }

    fn open(&mut self, provider: &dyn CryptoProvider, msg: &WireMessage) -> Result<Vec<u8>, ProtocolError> {
        let h = &msg.header;
        if h.sender != self.peer_id || h.receiver != self.self_id {
            return Err(ProtocolError::Auth);
        }
        if h.seq <= self.recv_seq {
            return Err(ProtocolError::StaleSequence { got: h.seq, high_water: self.recv_seq });
        }
        let ct = msg.body.ciphertext().ok_or_else(|| ProtocolError::Unexpected("frame without ciphertext".into()))?;
        let plain = provider.open(&self.key, &link_nonce(self.recv_dir, h.seq), &wire::aad_of(h), ct)?;
        self.recv_seq = h.seq;
        Ok(plain)
    }
}

/// Live pairwise channel between overlay neighbours.
#[derive(Clone, Debug)]
pub struct LinkSession {
    chan: Channel,
    established_at: u64,
}

impl LinkSession {
    /// Child end: sends in the up direction.
    pub fn child(self_id: EntityId, parent: EntityId, key: SymKey, now: u64) -> Self {
        Self { chan: Channel::new(self_id, parent, key, DIR_UP), established_at: now }
    }

    pub fn parent(self_id: EntityId, child: EntityId, key: SymKey, now: u64) -> Self {
        Self { chan: Channel::new(self_id, child, key, DIR_DOWN), established_at: now }
    }

    /// Head-to-head link: the lexicographically smaller id sends up.
    pub fn peer(self_id: EntityId, peer: EntityId, key: SymKey, now: u64) -> Self {
        let dir = if self_id < peer { DIR_UP } else { DIR_DOWN };
        Self { chan: Channel::new(self_id, peer, key, dir), established_at: now }
    }

    pub fn self_id(&self) -> &EntityId {
        &self.chan.self_id
    }

    pub fn peer_id(&self) -> &EntityId {
        &self.chan.peer_id
    }

    pub fn key(&self) -> &SymKey {
        &self.chan.key
    }

    pub fn send_seq(&self) -> u64 {
        self.chan.send_seq
    }

    pub fn recv_seq(&self) -> u64 {
        self.chan.recv_seq
    }

    pub fn established_at(&self) -> u64 {
        self.established_at
    }

    /// Seals `plaintext` into an encoded frame of type `msg_type` and
    /// advances the send counter.
    pub fn seal_frame(
        &mut self,
        provider: &dyn CryptoProvider,
        msg_type: MsgType,
        plaintext: &[u8],
    ) -> Result<Vec<u8>, ProtocolError> {
        self.chan.seal(provider, msg_type, plaintext)
    }

    /// Verifies sequence and tag of a decoded frame and returns its plaintext.
    pub fn open_frame(&mut self, provider: &dyn CryptoProvider, msg: &WireMessage) -> Result<Vec<u8>, ProtocolError> {
        self.chan.open(provider, msg)
    }
}

/// End-to-end session between the two endpoints of an exchange.
#[derive(Clone, Debug)]
pub struct PeerSession {
    chan: Channel,
    exchange_id: ExchangeId,
}

impl PeerSession {
    pub fn initiator(self_id: EntityId, responder: EntityId, key: SymKey, exchange_id: ExchangeId) -> Self {
        Self { chan: Channel::new(self_id, responder, key, DIR_UP), exchange_id }
    }

    pub fn responder(self_id: EntityId, initiator: EntityId, key: SymKey, exchange_id: ExchangeId) -> Self {
        Self { chan: Channel::new(self_id, initiator, key, DIR_DOWN), exchange_id }
    }

    pub fn peer(&self) -> &EntityId {
        &self.chan.peer_id
    }

    pub fn key(&self) -> &SymKey {
        &self.chan.key
    }

    pub fn exchange_id(&self) -> &ExchangeId {
        &self.exchange_id
    }

    pub fn send_seq(&self) -> u64 {
        self.chan.send_seq
    }

    pub fn recv_seq(&self) -> u64 {
        self.chan.recv_seq
    }

    /// Seals application bytes into a DATA frame.
    pub fn session_send(&mut self, provider: &dyn CryptoProvider, payload: &[u8]) -> Result<Vec<u8>, ProtocolError> {
        self.chan.seal(provider, MsgType::Data, payload)
    }

    /// Opens a DATA frame; replays fail with `StaleSequence`.
    pub fn session_recv(&mut self, provider: &dyn CryptoProvider, bytes: &[u8]) -> Result<Vec<u8>, ProtocolError> {
        let msg = wire::decode(bytes)?;
        if msg.header.msg_type != MsgType::Data {
            return Err(ProtocolError::Unexpected(format!("{} on a peer session", msg.header.msg_type.name())));
        }
        self.chan.open(provider, &msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::ChaChaHkdf;

    fn id(s: &str) -> EntityId {
        EntityId::new(s).unwrap()
    }

    fn pair() -> (PeerSession, PeerSession) {
        let k = SymKey::from_bytes([1; 32]);
        (
            PeerSession::initiator(id("N1"), id("N2"), k.clone(), [0; 16]),
            PeerSession::responder(id("N2"), id("N1"), k, [0; 16]),
        )
    }

    #[test]
    fn traffic_roundtrip_both_directions() {
        let p = ChaChaHkdf;
        let (mut a, mut b) = pair();
        let f = a.session_send(&p, b"lights on").unwrap();
        assert_eq!(b.session_recv(&p, &f).unwrap(), b"lights on");
        let g = b.session_send(&p, b"ok").unwrap();
        assert_eq!(a.session_recv(&p, &g).unwrap(), b"ok");
        assert_eq!(a.send_seq(), 2);
        assert_eq!(a.recv_seq(), 1);
    }

    #[test]
    fn replayed_frame_is_stale() {
        let p = ChaChaHkdf;
        let (mut a, mut b) = pair();
        let f = a.session_send(&p, b"x").unwrap();
        b.session_recv(&p, &f).unwrap();
        assert_eq!(b.session_recv(&p, &f), Err(ProtocolError::StaleSequence { got: 1, high_water: 1 }));
    }

    #[test]
    fn reflected_frame_fails() {
        let p = ChaChaHkdf;
        let (mut a, _) = pair();
        let f = a.session_send(&p, b"x").unwrap();
        // Sent back to its own author: sender/receiver do not line up.
        assert_eq!(a.session_recv(&p, &f), Err(ProtocolError::Auth));
    }

    #[test]
    fn tampered_frame_fails_without_advancing() {
        let p = ChaChaHkdf;
        let (mut a, mut b) = pair();
        let mut f = a.session_send(&p, b"x").unwrap();
        let last = f.len() - 1;
        f[last] ^= 1;
        assert_eq!(b.session_recv(&p, &f), Err(ProtocolError::Auth));
        assert_eq!(b.recv_seq(), 0);
    }

    #[test]
    fn resequenced_frame_fails() {
        let p = ChaChaHkdf;
        let (mut a, mut b) = pair();
        let f = a.session_send(&p, b"x").unwrap();
        let mut m = wire::decode(&f).unwrap();
        m.header.seq = 5;
        let f2 = wire::encode(&m).unwrap();
        assert_eq!(b.session_recv(&p, &f2), Err(ProtocolError::Auth));
    }

    #[test]
    fn head_link_direction_by_id_order() {
        let k = SymKey::from_bytes([2; 32]);
        let p = ChaChaHkdf;
        let mut h1 = LinkSession::peer(id("H1"), id("H2"), k.clone(), 0);
        let mut h2 = LinkSession::peer(id("H2"), id("H1"), k, 0);
        let f = h1.seal_frame(&p, MsgType::Relay, b"payload").unwrap();
        assert_eq!(h2.open_frame(&p, &wire::decode(&f).unwrap()).unwrap(), b"payload");
        let g = h2.seal_frame(&p, MsgType::Relay, b"back").unwrap();
        assert_eq!(h1.open_frame(&p, &wire::decode(&g).unwrap()).unwrap(), b"back");
    }

    #[test]
    fn head_link_key_is_order_insensitive() {
        let p = ChaChaHkdf;
        let k = SymKey::from_bytes([3; 32]);
        assert_eq!(
            derive_head_link_key(&p, &k, &id("H1"), &id("H2"), b"d").unwrap(),
            derive_head_link_key(&p, &k, &id("H2"), &id("H1"), b"d").unwrap()
        );
    }
}
