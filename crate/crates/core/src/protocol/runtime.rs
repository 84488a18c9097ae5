use std::collections::{BTreeMap, HashSet, VecDeque};
use std::sync::Arc;

use serde::Serialize;

use crate::crypto::{CryptoProvider, Nonce, RandomSource, Seed, SymKey};
use crate::hierarchy::{
    derive_binding_key, EntityId, HierarchyError, MasterKeyReceipt, NetworkParams, Role, Topology, TrustPath,
};
use crate::wire::{
    self, Body, ChallengePlain, ConfirmPlain, E2ePayload, ExchangeId, FinishPlain, MsgType, PayloadKind, WireHeader,
    WireMessage,
};

use super::session::{derive_e2e_key, derive_head_link_key, derive_link_key, LinkSession, PeerSession};
use super::{handshake_nonce, link_nonce, ErrorCode, ProtocolError, DIR_DOWN, DIR_UP};

pub const REPLAY_CAPACITY: usize = 4096;

/// One message produced by a runtime, to be carried by the network.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Outgoing {
    pub to: EntityId,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Copy, Default, PartialEq, Eq, Debug, Serialize)]
pub struct EntityMetrics {
    pub aead_seal_count: u64,
    pub aead_open_count: u64,
    pub aead_open_fail_count: u64,
    pub kdf_count: u64,
    pub msgs_sent: u64,
    pub msgs_received: u64,
    pub bytes_sent: u64,
}

impl EntityMetrics {
    /// Seals plus opens, failed opens included.
    pub fn aead_ops(&self) -> u64 {
        self.aead_seal_count + self.aead_open_count
    }

    /// Counter growth since `earlier`.
    pub fn since(&self, earlier: &EntityMetrics) -> EntityMetrics {
        EntityMetrics {
            aead_seal_count: self.aead_seal_count - earlier.aead_seal_count,
            aead_open_count: self.aead_open_count - earlier.aead_open_count,
            aead_open_fail_count: self.aead_open_fail_count - earlier.aead_open_fail_count,
            kdf_count: self.kdf_count - earlier.kdf_count,
            msgs_sent: self.msgs_sent - earlier.msgs_sent,
            msgs_received: self.msgs_received - earlier.msgs_received,
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
        }
    }

    pub fn add(&mut self, other: &EntityMetrics) {
        self.aead_seal_count += other.aead_seal_count;
        self.aead_open_count += other.aead_open_count;
        self.aead_open_fail_count += other.aead_open_fail_count;
        self.kdf_count += other.kdf_count;
        self.msgs_sent += other.msgs_sent;
        self.msgs_received += other.msgs_received;
        self.bytes_sent += other.bytes_sent;
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ExchangeRole {
    Initiator,
    Responder,
    Mediator,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ExchangeStatus {
    AwaitingResponse,
    AwaitingConfirm,
    Complete,
    /// `None` when the failure has no wire code (timeout).
    Failed(Option<ErrorCode>),
}

impl ExchangeStatus {
    pub fn is_pending(self) -> bool {
        matches!(self, ExchangeStatus::AwaitingResponse | ExchangeStatus::AwaitingConfirm)
    }
}

/// What one participant knows about one exchange.
#[derive(Clone, Debug)]
pub struct ExchangeState {
    pub exchange_id: ExchangeId,
    pub initiator: EntityId,
    pub responder: EntityId,
    pub role: ExchangeRole,
    pub path: TrustPath,
    pub nonce_i: Nonce,
    pub nonce_r: Option<Nonce>,
    pub seed_i: Option<Seed>,
    pub seed_r: Option<Seed>,
    pub status: ExchangeStatus,
    /// Neighbours on the path, for mediators.
    pub prev: Option<EntityId>,
    pub next: Option<EntityId>,
    key: Option<SymKey>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum HandshakeStatus {
    AwaitingChallenge,
    AwaitingFinish,
    Complete,
    Failed(Option<ErrorCode>),
}

#[derive(Clone, Debug)]
struct Handshake {
    as_child: bool,
    shared: SymKey,
    nonce_c: Nonce,
    nonce_p: Option<Nonce>,
    seed_p: Option<Seed>,
    status: HandshakeStatus,
}

/// Bounded FIFO of `(initiator, exchange_id)` pairs already answered.
#[derive(Clone, Debug)]
pub struct ReplayCache {
    capacity: usize,
    order: VecDeque<(EntityId, ExchangeId)>,
    seen: HashSet<(EntityId, ExchangeId)>,
}

impl ReplayCache {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, order: VecDeque::new(), seen: HashSet::new() }
    }

    pub fn contains(&self, peer: &EntityId, xid: &ExchangeId) -> bool {
        self.seen.contains(&(peer.clone(), *xid))
    }

    /// Returns `false` if the pair was already present.
    pub fn insert(&mut self, peer: &EntityId, xid: &ExchangeId) -> bool {
        let k = (peer.clone(), *xid);
        if !self.seen.insert(k.clone()) {
            return false;
        }
        self.order.push_back(k);
        if self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        true
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

impl Default for ReplayCache {
    fn default() -> Self {
        Self::new(REPLAY_CAPACITY)
    }
}

/// An ERROR message as received.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ReceivedError {
    pub from: EntityId,
    pub code: u16,
    pub detail: String,
    pub exchange_id: Option<ExchangeId>,
    pub initiator: Option<EntityId>,
    /// The entity the error is about (the revoked or unknown one).
    pub id: Option<EntityId>,
}

impl ReceivedError {
    fn parse(from: EntityId, code: u16, detail: String) -> Self {
        let mut e = ReceivedError { from, code, detail: detail.clone(), exchange_id: None, initiator: None, id: None };
        for field in detail.split(';') {
            let Some((k, v)) = field.split_once('=') else { continue };
            match k {
                "xid" => {
                    e.exchange_id = hex::decode(v).ok().and_then(|b| b.try_into().ok());
                }
                "init" => e.initiator = EntityId::new(v).ok(),
                "id" => e.id = EntityId::new(v).ok(),
                _ => {}
            }
        }
        e
    }
}

struct ErrorReply<'a> {
    code: ErrorCode,
    exchange: Option<(&'a EntityId, &'a ExchangeId)>,
    about: Option<&'a EntityId>,
    reason: String,
}

impl ErrorReply<'_> {
    fn detail(&self) -> String {
        let mut parts = Vec::new();
        if let Some((init, xid)) = self.exchange {
            parts.push(format!("xid={}", hex::encode(xid)));
            parts.push(format!("init={init}"));
        }
        if let Some(id) = self.about {
            parts.push(format!("id={id}"));
        }
        let reason: String = self.reason.replace(';', ",").chars().take(200).collect();
        parts.push(format!("reason={reason}"));
        parts.join(";")
    }
}

/// The protocol engine of one entity.
pub struct EntityRuntime {
    id: EntityId,
    role: Role,
    label: Vec<u8>,
    provider: Arc<dyn CryptoProvider>,
    rng: Box<dyn RandomSource>,
    master_key: Option<SymKey>,
    /// Shared long-term key per upward neighbour (master or binding key).
    credentials: BTreeMap<EntityId, SymKey>,
    links: BTreeMap<EntityId, LinkSession>,
    handshakes: BTreeMap<EntityId, Handshake>,
    exchanges: BTreeMap<(EntityId, ExchangeId), ExchangeState>,
    sessions: BTreeMap<EntityId, PeerSession>,
    replay: ReplayCache,
    errors: Vec<ReceivedError>,
    faults: Vec<ProtocolError>,
    inbox: Vec<(EntityId, Vec<u8>)>,
    metrics: EntityMetrics,
    now: u64,
}

impl std::fmt::Debug for EntityRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EntityRuntime")
            .field("id", &self.id)
            .field("role", &self.role)
            .field("links", &self.links.keys().collect::<Vec<_>>())
            .field("sessions", &self.sessions.keys().collect::<Vec<_>>())
            .field("metrics", &self.metrics)
            .finish_non_exhaustive()
    }
}

impl EntityRuntime {
    pub fn new(
        id: EntityId,
        role: Role,
        params: &NetworkParams,
        provider: Arc<dyn CryptoProvider>,
        rng: Box<dyn RandomSource>,
    ) -> Self {
        Self {
            id,
            role,
            label: params.deployment_label.clone(),
            provider,
            rng,
            master_key: None,
            credentials: BTreeMap::new(),
            links: BTreeMap::new(),
            handshakes: BTreeMap::new(),
            exchanges: BTreeMap::new(),
            sessions: BTreeMap::new(),
            replay: ReplayCache::default(),
            errors: Vec::new(),
            faults: Vec::new(),
            inbox: Vec::new(),
            metrics: EntityMetrics::default(),
            now: 0,
        }
    }

    pub fn id(&self) -> &EntityId {
        &self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn metrics(&self) -> EntityMetrics {
        self.metrics
    }

    pub fn set_clock(&mut self, now: u64) {
        self.now = now;
    }

    /// Stores the master key delivered out of band at registration.
    pub fn accept_master_key(&mut self, receipt: &MasterKeyReceipt) {
        self.master_key = Some(receipt.master_key.clone());
        self.credentials.insert(receipt.registrar.clone(), receipt.master_key.clone());
    }

    pub fn link(&self, peer: &EntityId) -> Option<&LinkSession> {
        self.links.get(peer)
    }

    pub fn links(&self) -> impl Iterator<Item = &LinkSession> {
        self.links.values()
    }

    pub fn session(&self, peer: &EntityId) -> Option<&PeerSession> {
        self.sessions.get(peer)
    }

    pub fn exchange(&self, initiator: &EntityId, xid: &ExchangeId) -> Option<&ExchangeState> {
        self.exchanges.get(&(initiator.clone(), *xid))
    }

    pub fn exchanges(&self) -> impl Iterator<Item = &ExchangeState> {
        self.exchanges.values()
    }

    pub fn handshake_status(&self, peer: &EntityId) -> Option<HandshakeStatus> {
        self.handshakes.get(peer).map(|h| h.status)
    }

    pub fn errors(&self) -> &[ReceivedError] {
        &self.errors
    }

    /// Local detections: dropped frames, failed opens, rejected requests.
    pub fn faults(&self) -> &[ProtocolError] {
        &self.faults
    }

    pub fn replay_cache(&self) -> &ReplayCache {
        &self.replay
    }

    /// Application payloads received so far, oldest first.
    pub fn take_inbox(&mut self) -> Vec<(EntityId, Vec<u8>)> {
        std::mem::take(&mut self.inbox)
    }

    /// Forgets every link, session and pending handshake with `id`.
    pub fn purge(&mut self, id: &EntityId) {
        self.links.remove(id);
        self.sessions.remove(id);
        self.handshakes.remove(id);
        self.credentials.remove(id);
    }

    fn emit(&mut self, to: &EntityId, bytes: Vec<u8>) -> Outgoing {
        self.metrics.msgs_sent += 1;
        self.metrics.bytes_sent += bytes.len() as u64;
        Outgoing { to: to.clone(), bytes }
    }

    fn note_open<T>(&mut self, r: &Result<T, ProtocolError>) {
        match r {
            Ok(_) => self.metrics.aead_open_count += 1,
            Err(ProtocolError::Auth) => {
                self.metrics.aead_open_count += 1;
                self.metrics.aead_open_fail_count += 1;
            }
            Err(_) => {}
        }
    }

    fn open_raw(
        &mut self,
        key: &SymKey,
        nonce: &Nonce,
        header: &WireHeader,
        ct: &[u8],
    ) -> Result<Vec<u8>, ProtocolError> {
        let r = self.provider.open(key, nonce, &wire::aad_of(header), ct).map_err(ProtocolError::from);
        self.note_open(&r);
        r
    }

    fn seal_raw(
        &mut self,
        key: &SymKey,
        nonce: &Nonce,
        header: WireHeader,
        pt: &[u8],
    ) -> Result<Vec<u8>, ProtocolError> {
        let sealed = self.provider.seal(key, nonce, &wire::aad_of(&header), pt);
        self.metrics.aead_seal_count += 1;
        let body = Body::with_ciphertext(header.msg_type, sealed.into_bytes())
            .ok_or_else(|| ProtocolError::Unexpected("sealed body type".into()))?;
        Ok(wire::encode(&WireMessage { header, body })?)
    }

    fn seal_on_link(&mut self, peer: &EntityId, t: MsgType, pt: &[u8]) -> Result<Outgoing, ProtocolError> {
        let link = self.links.get_mut(peer).ok_or_else(|| ProtocolError::LinkUnavailable(peer.clone()))?;
        let bytes = link.seal_frame(self.provider.as_ref(), t, pt)?;
        self.metrics.aead_seal_count += 1;
        Ok(self.emit(peer, bytes))
    }

    fn error_to(&mut self, to: &EntityId, reply: ErrorReply<'_>) -> Outgoing {
        let msg = WireMessage::new(
            self.id.clone(),
            to.clone(),
            0,
            Body::Error { code: reply.code as u16, detail: reply.detail() },
        );
        let bytes = wire::encode(&msg).expect("error detail is bounded");
        self.emit(to, bytes)
    }

    fn kdf_tick(&mut self) {
        self.metrics.kdf_count += 1;
    }

    fn credential_for(&mut self, parent: &EntityId, topo: &Topology) -> Result<SymKey, ProtocolError> {
        if let Some(k) = self.credentials.get(parent) {
            return Ok(k.clone());
        }
        if self.role == Role::Node && topo.is_parent_of(parent, &self.id) {
            if let Some(mk) = self.master_key.clone() {
                let bk = derive_binding_key(self.provider.as_ref(), &mk, &self.id, parent, &self.label)?;
                self.kdf_tick();
                self.credentials.insert(parent.clone(), bk.clone());
                return Ok(bk);
            }
        }
        Err(ProtocolError::NoCredential(parent.clone()))
    }

    // ---- link handshake -------------------------------------------------

    /// Child side: sends HELLO to `parent`.
    pub fn start_handshake(&mut self, parent: &EntityId, topo: &Topology) -> Result<Vec<Outgoing>, ProtocolError> {
        let shared = self.credential_for(parent, topo)?;
        let nonce_c = self.rng.random_nonce();
        self.handshakes.insert(
            parent.clone(),
            Handshake {
                as_child: true,
                shared,
                nonce_c,
                nonce_p: None,
                seed_p: None,
                status: HandshakeStatus::AwaitingChallenge,
            },
        );
        let msg = WireMessage::new(self.id.clone(), parent.clone(), 0, Body::Hello { nonce_c });
        let bytes = wire::encode(&msg)?;
        Ok(vec![self.emit(parent, bytes)])
    }

    fn on_hello(&mut self, from: &EntityId, nonce_c: Nonce, topo: &Topology) -> Vec<Outgoing> {
        let shared = match topo.parent_side_key(self.provider.as_ref(), from, &self.id) {
            Ok(k) => k,
            Err(HierarchyError::RevokedEntity(x)) => {
                self.faults.push(ProtocolError::RevokedEntity(x.clone()));
                let reply = ErrorReply {
                    code: ErrorCode::RevokedEntity,
                    exchange: None,
                    about: Some(&x),
                    reason: "handshake".into(),
                };
                return vec![self.error_to(from, reply)];
            }
            Err(e) => {
                self.faults.push(ProtocolError::Hierarchy(e.clone()));
                let reply = ErrorReply {
                    code: ErrorCode::AuthFailure,
                    exchange: None,
                    about: Some(from),
                    reason: e.to_string(),
                };
                return vec![self.error_to(from, reply)];
            }
        };
        let nonce_p = self.rng.random_nonce();
        let seed_p = self.rng.random_seed();
        let plain = ChallengePlain { nonce_c, nonce_p, seed_p }.encode();
        let header =
            WireHeader { msg_type: MsgType::LinkChallenge, sender: self.id.clone(), receiver: from.clone(), seq: 0 };
        let bytes = match self.seal_raw(&shared, &handshake_nonce(&nonce_c, DIR_DOWN), header, &plain) {
            Ok(b) => b,
            Err(e) => {
                self.faults.push(e);
                return Vec::new();
            }
        };
        self.handshakes.insert(
            from.clone(),
            Handshake {
                as_child: false,
                shared,
                nonce_c,
                nonce_p: Some(nonce_p),
                seed_p: Some(seed_p),
                status: HandshakeStatus::AwaitingFinish,
            },
        );
        vec![self.emit(from, bytes)]
    }

    fn fail_handshake(&mut self, peer: &EntityId, err: ProtocolError) -> Vec<Outgoing> {
        if let Some(h) = self.handshakes.get_mut(peer) {
            h.status = HandshakeStatus::Failed(Some(ErrorCode::AuthFailure));
        }
        self.faults.push(err);
        let reply =
            ErrorReply { code: ErrorCode::AuthFailure, exchange: None, about: Some(peer), reason: "handshake".into() };
        vec![self.error_to(peer, reply)]
    }

    fn on_challenge(&mut self, msg: &WireMessage) -> Vec<Outgoing> {
        let from = &msg.header.sender;
        let Some(hs) =
            self.handshakes.get(from).filter(|h| h.as_child && h.status == HandshakeStatus::AwaitingChallenge).cloned()
        else {
            self.faults.push(ProtocolError::Unexpected(format!("challenge from {from}")));
            return Vec::new();
        };
        let ct = msg.body.ciphertext().unwrap_or_default();
        let plain = match self.open_raw(&hs.shared, &handshake_nonce(&hs.nonce_c, DIR_DOWN), &msg.header, ct) {
            Ok(p) => p,
            Err(e) => return self.fail_handshake(from, e),
        };
        let ch = match ChallengePlain::decode(&plain) {
            Ok(c) if c.nonce_c == hs.nonce_c => c,
            Ok(_) => return self.fail_handshake(from, ProtocolError::NonceMismatch),
            Err(e) => return self.fail_handshake(from, e.into()),
        };
        let seed_c = self.rng.random_seed();
        let key = match derive_link_key(
            self.provider.as_ref(),
            &hs.shared,
            &self.id,
            from,
            &hs.nonce_c,
            &ch.nonce_p,
            &seed_c,
            &ch.seed_p,
            &self.label,
        ) {
            Ok(k) => k,
            Err(e) => return self.fail_handshake(from, e),
        };
        self.kdf_tick();
        let header =
            WireHeader { msg_type: MsgType::LinkFinish, sender: self.id.clone(), receiver: from.clone(), seq: 0 };
        let fin = FinishPlain { nonce_p: ch.nonce_p, seed_c }.encode();
        let bytes = match self.seal_raw(&hs.shared, &handshake_nonce(&ch.nonce_p, DIR_UP), header, &fin) {
            Ok(b) => b,
            Err(e) => return self.fail_handshake(from, e),
        };
        self.links.insert(from.clone(), LinkSession::child(self.id.clone(), from.clone(), key, self.now));
        if let Some(h) = self.handshakes.get_mut(from) {
            h.status = HandshakeStatus::Complete;
        }
        vec![self.emit(from, bytes)]
    }

    fn on_finish(&mut self, msg: &WireMessage) -> Vec<Outgoing> {
        let from = &msg.header.sender;
        let Some(hs) =
            self.handshakes.get(from).filter(|h| !h.as_child && h.status == HandshakeStatus::AwaitingFinish).cloned()
        else {
            self.faults.push(ProtocolError::Unexpected(format!("finish from {from}")));
            return Vec::new();
        };
        let (nonce_p, seed_p) = (hs.nonce_p.expect("parent side"), hs.seed_p.expect("parent side"));
        let ct = msg.body.ciphertext().unwrap_or_default();
        let plain = match self.open_raw(&hs.shared, &handshake_nonce(&nonce_p, DIR_UP), &msg.header, ct) {
            Ok(p) => p,
            Err(e) => return self.fail_handshake(from, e),
        };
        let fin = match FinishPlain::decode(&plain) {
            Ok(f) if f.nonce_p == nonce_p => f,
            Ok(_) => return self.fail_handshake(from, ProtocolError::NonceMismatch),
            Err(e) => return self.fail_handshake(from, e.into()),
        };
        let key = match derive_link_key(
            self.provider.as_ref(),
            &hs.shared,
            from,
            &self.id,
            &hs.nonce_c,
            &nonce_p,
            &fin.seed_c,
            &seed_p,
            &self.label,
        ) {
            Ok(k) => k,
            Err(e) => return self.fail_handshake(from, e),
        };
        self.kdf_tick();
        self.links.insert(from.clone(), LinkSession::parent(self.id.clone(), from.clone(), key, self.now));
        if let Some(h) = self.handshakes.get_mut(from) {
            h.status = HandshakeStatus::Complete;
        }
        Vec::new()
    }

    // ---- end-to-end establishment --------------------------------------

    /// Starts an exchange with `responder` over the structural route.
    pub fn initiate(
        &mut self,
        responder: &EntityId,
        topo: &Topology,
    ) -> Result<(ExchangeId, Vec<Outgoing>), ProtocolError> {
        let path = topo.route_hint(&self.id, responder)?;
        let first = path.hops[1].clone();
        if !self.links.contains_key(&first) {
            return Err(ProtocolError::LinkUnavailable(first));
        }
        let mut xid: ExchangeId = [0; wire::EXCHANGE_ID_LEN];
        self.rng.fill(&mut xid);
        let nonce_i = self.rng.random_nonce();
        let seed_i = self.rng.random_seed();
        let payload = E2ePayload {
            kind: PayloadKind::Request,
            exchange_id: xid,
            initiator: self.id.clone(),
            responder: responder.clone(),
            nonce_i,
            nonce_r: None,
            seed: seed_i,
        };
        let out = self.seal_on_link(&first, MsgType::Relay, &wire::encode_payload(&payload))?;
        self.exchanges.insert(
            (self.id.clone(), xid),
            ExchangeState {
                exchange_id: xid,
                initiator: self.id.clone(),
                responder: responder.clone(),
                role: ExchangeRole::Initiator,
                path,
                nonce_i,
                nonce_r: None,
                seed_i: Some(seed_i),
                seed_r: None,
                status: ExchangeStatus::AwaitingResponse,
                prev: None,
                next: Some(first),
                key: None,
            },
        );
        Ok((xid, vec![out]))
    }

    fn on_relay(&mut self, msg: &WireMessage, topo: &Topology) -> Vec<Outgoing> {
        let from = msg.header.sender.clone();
        let opened = match self.links.get_mut(&from) {
            Some(link) => link.open_frame(self.provider.as_ref(), msg),
            None => Err(ProtocolError::LinkUnavailable(from.clone())),
        };
        self.note_open(&opened);
        let plain = match opened {
            Ok(p) => p,
            Err(e) => {
                let code = match e {
                    ProtocolError::StaleSequence { .. } => ErrorCode::ReplayDetected,
                    _ => ErrorCode::AuthFailure,
                };
                let reply = ErrorReply { code, exchange: None, about: Some(&from), reason: e.to_string() };
                self.faults.push(e);
                return vec![self.error_to(&from, reply)];
            }
        };
        let payload = match wire::decode_payload(&plain) {
            Ok(p) => p,
            Err(e) => {
                let reply =
                    ErrorReply { code: ErrorCode::PathViolation, exchange: None, about: None, reason: e.to_string() };
                self.faults.push(e.into());
                return vec![self.error_to(&from, reply)];
            }
        };
        match payload.kind {
            PayloadKind::Request if payload.responder == self.id => self.respond(&from, payload, topo),
            PayloadKind::Request => self.mediate_request(&from, payload, &plain, topo),
            PayloadKind::Response if payload.initiator == self.id => self.finalize(&from, payload),
            PayloadKind::Response => self.mediate_response(&from, payload, &plain),
        }
    }

    /// Maps a strict path-resolution failure to its wire error.
    fn path_error(&mut self, to: &EntityId, p: &E2ePayload, e: ProtocolError) -> Vec<Outgoing> {
        let (code, about) = match &e {
            ProtocolError::Hierarchy(HierarchyError::RevokedEntity(x)) | ProtocolError::RevokedEntity(x) => {
                (ErrorCode::RevokedEntity, Some(x.clone()))
            }
            ProtocolError::Hierarchy(HierarchyError::UnknownEntity(x)) | ProtocolError::UnknownEntity(x) => {
                (ErrorCode::UnknownEntity, Some(x.clone()))
            }
            ProtocolError::ReplayDetected | ProtocolError::StaleSequence { .. } => (ErrorCode::ReplayDetected, None),
            _ => (ErrorCode::PathViolation, None),
        };
        let reply = ErrorReply {
            code,
            exchange: Some((&p.initiator, &p.exchange_id)),
            about: about.as_ref(),
            reason: e.to_string(),
        };
        let out = self.error_to(to, reply);
        self.faults.push(e);
        vec![out]
    }

    fn mediate_request(&mut self, from: &EntityId, p: E2ePayload, plain: &[u8], topo: &Topology) -> Vec<Outgoing> {
        if !self.role.is_mediator() {
            let e = ProtocolError::PathViolation(format!("{} does not mediate", self.id));
            return self.path_error(from, &p, e);
        }
        if !topo.is_active(&self.id) {
            let e = ProtocolError::RevokedEntity(self.id.clone());
            return self.path_error(from, &p, e);
        }
        let path = match topo.resolve_path(&p.initiator, &p.responder) {
            Ok(path) => path,
            Err(e) => return self.path_error(from, &p, e.into()),
        };
        let pos = match path.position(&self.id) {
            Some(i) if i > 0 && i + 1 < path.hops.len() && &path.hops[i - 1] == from => i,
            _ => {
                let e = ProtocolError::PathViolation(format!("{} is not the hop after {from} on {path}", self.id));
                return self.path_error(from, &p, e);
            }
        };
        let key = (p.initiator.clone(), p.exchange_id);
        if self.exchanges.contains_key(&key) {
            return self.path_error(from, &p, ProtocolError::ReplayDetected);
        }
        let next = path.hops[pos + 1].clone();
        let out = match self.seal_on_link(&next, MsgType::Relay, plain) {
            Ok(o) => o,
            Err(e) => return self.path_error(from, &p, e),
        };
        self.exchanges.insert(
            key,
            ExchangeState {
                exchange_id: p.exchange_id,
                initiator: p.initiator,
                responder: p.responder,
                role: ExchangeRole::Mediator,
                path,
                nonce_i: p.nonce_i,
                nonce_r: None,
                seed_i: Some(p.seed),
                seed_r: None,
                status: ExchangeStatus::AwaitingResponse,
                prev: Some(from.clone()),
                next: Some(next),
                key: None,
            },
        );
        vec![out]
    }

    fn respond(&mut self, from: &EntityId, p: E2ePayload, topo: &Topology) -> Vec<Outgoing> {
        if self.replay.contains(&p.initiator, &p.exchange_id) {
            return self.path_error(from, &p, ProtocolError::ReplayDetected);
        }
        let path = match topo.resolve_path(&p.initiator, &self.id) {
            Ok(path) => path,
            Err(e) => return self.path_error(from, &p, e.into()),
        };
        if path.hops[path.hops.len() - 2] != *from {
            let e = ProtocolError::PathViolation(format!("request for {} arrived from {from}", self.id));
            return self.path_error(from, &p, e);
        }
        self.replay.insert(&p.initiator, &p.exchange_id);
        let nonce_r = self.rng.random_nonce();
        let seed_r = self.rng.random_seed();
        let key = match derive_e2e_key(
            self.provider.as_ref(),
            &p.seed,
            &seed_r,
            &p.initiator,
            &self.id,
            &p.exchange_id,
            &p.nonce_i,
            &nonce_r,
            &self.label,
        ) {
            Ok(k) => k,
            Err(e) => return self.path_error(from, &p, e),
        };
        self.kdf_tick();
        let resp = E2ePayload {
            kind: PayloadKind::Response,
            exchange_id: p.exchange_id,
            initiator: p.initiator.clone(),
            responder: self.id.clone(),
            nonce_i: p.nonce_i,
            nonce_r: Some(nonce_r),
            seed: seed_r,
        };
        let out = match self.seal_on_link(from, MsgType::Relay, &wire::encode_payload(&resp)) {
            Ok(o) => o,
            Err(e) => return self.path_error(from, &p, e),
        };
        // A fresh request means the initiator gave up on any earlier one.
        for s in self.exchanges.values_mut() {
            if s.role == ExchangeRole::Responder
                && s.initiator == p.initiator
                && s.status == ExchangeStatus::AwaitingConfirm
            {
                s.status = ExchangeStatus::Failed(None);
                s.key = None;
            }
        }
        self.exchanges.insert(
            (p.initiator.clone(), p.exchange_id),
            ExchangeState {
                exchange_id: p.exchange_id,
                initiator: p.initiator,
                responder: self.id.clone(),
                role: ExchangeRole::Responder,
                path,
                nonce_i: p.nonce_i,
                nonce_r: Some(nonce_r),
                seed_i: Some(p.seed),
                seed_r: Some(seed_r),
                status: ExchangeStatus::AwaitingConfirm,
                prev: Some(from.clone()),
                next: None,
                key: Some(key),
            },
        );
        vec![out]
    }

    fn mediate_response(&mut self, from: &EntityId, p: E2ePayload, plain: &[u8]) -> Vec<Outgoing> {
        let key = (p.initiator.clone(), p.exchange_id);
        let prev = match self.exchanges.get(&key) {
            Some(s)
                if s.role == ExchangeRole::Mediator
                    && s.status == ExchangeStatus::AwaitingResponse
                    && s.next.as_ref() == Some(from) =>
            {
                s.prev.clone().expect("mediators record the previous hop")
            }
            _ => {
                let e = ProtocolError::Unexpected(format!("response from {from} for an unknown exchange"));
                return self.path_error(from, &p, e);
            }
        };
        match self.seal_on_link(&prev, MsgType::Relay, plain) {
            Ok(out) => {
                let s = self.exchanges.get_mut(&key).expect("checked above");
                s.nonce_r = p.nonce_r;
                s.seed_r = Some(p.seed);
                s.status = ExchangeStatus::Complete;
                vec![out]
            }
            Err(e) => {
                self.faults.push(e);
                Vec::new()
            }
        }
    }

    fn finalize(&mut self, from: &EntityId, p: E2ePayload) -> Vec<Outgoing> {
        let key = (self.id.clone(), p.exchange_id);
        let Some(state) = self
            .exchanges
            .get(&key)
            .filter(|s| s.role == ExchangeRole::Initiator && s.status == ExchangeStatus::AwaitingResponse)
            .cloned()
        else {
            self.faults.push(ProtocolError::Unexpected(format!("response from {from} for no pending exchange")));
            return Vec::new();
        };
        if state.next.as_ref() != Some(from) || p.responder != state.responder {
            self.faults.push(ProtocolError::PathViolation(format!("response arrived from {from}")));
            return Vec::new();
        }
        let (Some(nonce_r), true) = (p.nonce_r, p.nonce_i == state.nonce_i) else {
            self.exchanges.get_mut(&key).expect("present").status =
                ExchangeStatus::Failed(Some(ErrorCode::AuthFailure));
            self.faults.push(ProtocolError::NonceMismatch);
            return Vec::new();
        };
        let seed_i = state.seed_i.expect("initiator keeps its seed");
        let sk = match derive_e2e_key(
            self.provider.as_ref(),
            &seed_i,
            &p.seed,
            &self.id,
            &state.responder,
            &p.exchange_id,
            &state.nonce_i,
            &nonce_r,
            &self.label,
        ) {
            Ok(k) => k,
            Err(e) => {
                self.faults.push(e);
                return Vec::new();
            }
        };
        self.kdf_tick();
        let header = WireHeader {
            msg_type: MsgType::E2eConfirm,
            sender: self.id.clone(),
            receiver: state.responder.clone(),
            seq: 0,
        };
        let confirm = ConfirmPlain { exchange_id: p.exchange_id, nonce_r }.encode();
        let bytes = match self.seal_raw(&sk, &link_nonce(DIR_UP, 0), header, &confirm) {
            Ok(b) => b,
            Err(e) => {
                self.faults.push(e);
                return Vec::new();
            }
        };
        self.sessions.insert(
            state.responder.clone(),
            PeerSession::initiator(self.id.clone(), state.responder.clone(), sk.clone(), p.exchange_id),
        );
        let s = self.exchanges.get_mut(&key).expect("present");
        s.nonce_r = Some(nonce_r);
        s.seed_r = Some(p.seed);
        s.key = Some(sk);
        s.status = ExchangeStatus::Complete;
        let responder = state.responder;
        vec![self.emit(&responder, bytes)]
    }

    fn on_confirm(&mut self, msg: &WireMessage) -> Vec<Outgoing> {
        let from = msg.header.sender.clone();
        let ct = msg.body.ciphertext().unwrap_or_default().to_vec();
        let pending: Vec<(EntityId, ExchangeId)> = self
            .exchanges
            .iter()
            .filter(|(_, s)| {
                s.role == ExchangeRole::Responder && s.initiator == from && s.status == ExchangeStatus::AwaitingConfirm
            })
            .map(|(k, _)| k.clone())
            .collect();
        let nonce = link_nonce(DIR_UP, 0);
        for k in &pending {
            let s = &self.exchanges[k];
            let key = s.key.clone().expect("responders hold the pending key");
            let (xid, nonce_r) = (s.exchange_id, s.nonce_r);
            let Ok(plain) = self.open_raw(&key, &nonce, &msg.header, &ct) else { continue };
            match ConfirmPlain::decode(&plain) {
                Ok(c) if c.exchange_id == xid && Some(c.nonce_r) == nonce_r => {
                    self.sessions.insert(from.clone(), PeerSession::responder(self.id.clone(), from.clone(), key, xid));
                    self.exchanges.get_mut(k).expect("present").status = ExchangeStatus::Complete;
                    return Vec::new();
                }
                _ => {
                    self.exchanges.get_mut(k).expect("present").status =
                        ExchangeStatus::Failed(Some(ErrorCode::AuthFailure));
                    self.faults.push(ProtocolError::NonceMismatch);
                    let reply = ErrorReply {
                        code: ErrorCode::AuthFailure,
                        exchange: Some((&k.0, &k.1)),
                        about: None,
                        reason: "confirm echo".into(),
                    };
                    return vec![self.error_to(&from, reply)];
                }
            }
        }
        if pending.len() == 1 {
            let k = &pending[0];
            self.exchanges.get_mut(k).expect("present").status = ExchangeStatus::Failed(Some(ErrorCode::AuthFailure));
        }
        if pending.is_empty() {
            // A confirm for an exchange that already completed is a replay.
            let done: Vec<SymKey> = self
                .exchanges
                .values()
                .filter(|s| {
                    s.role == ExchangeRole::Responder && s.initiator == from && s.status == ExchangeStatus::Complete
                })
                .filter_map(|s| s.key.clone())
                .collect();
            for key in done {
                if self.open_raw(&key, &nonce, &msg.header, &ct).is_ok() {
                    self.faults.push(ProtocolError::ReplayDetected);
                    let reply = ErrorReply {
                        code: ErrorCode::ReplayDetected,
                        exchange: None,
                        about: None,
                        reason: "confirm replay".into(),
                    };
                    return vec![self.error_to(&from, reply)];
                }
            }
        }
        self.faults.push(ProtocolError::Auth);
        let reply =
            ErrorReply { code: ErrorCode::AuthFailure, exchange: None, about: Some(&from), reason: "confirm".into() };
        vec![self.error_to(&from, reply)]
    }

    // ---- errors ---------------------------------------------------------

    fn on_error(&mut self, from: &EntityId, code: u16, detail: String) -> Vec<Outgoing> {
        let err = ReceivedError::parse(from.clone(), code, detail.clone());
        self.errors.push(err.clone());
        let wire_code = ErrorCode::from_u16(code);
        if wire_code == Some(ErrorCode::RevokedEntity) {
            if let Some(id) = err.id.as_ref().filter(|id| **id != self.id) {
                self.purge(id);
            }
        }
        if let Some(h) = self.handshakes.get_mut(from) {
            if matches!(h.status, HandshakeStatus::AwaitingChallenge | HandshakeStatus::AwaitingFinish) {
                h.status = HandshakeStatus::Failed(wire_code);
            }
        }
        let (Some(xid), Some(init)) = (err.exchange_id, err.initiator) else {
            return Vec::new();
        };
        let Some(s) = self.exchanges.get_mut(&(init, xid)) else {
            return Vec::new();
        };
        if !s.status.is_pending() {
            return Vec::new();
        }
        match s.role {
            ExchangeRole::Mediator if s.next.as_ref() == Some(from) => {
                s.status = ExchangeStatus::Failed(wire_code);
                let prev = s.prev.clone().expect("mediators record the previous hop");
                let msg = WireMessage::new(self.id.clone(), prev.clone(), 0, Body::Error { code, detail });
                match wire::encode(&msg) {
                    Ok(bytes) => vec![self.emit(&prev, bytes)],
                    Err(_) => Vec::new(),
                }
            }
            ExchangeRole::Initiator if s.next.as_ref() == Some(from) => {
                s.status = ExchangeStatus::Failed(wire_code);
                Vec::new()
            }
            ExchangeRole::Responder if s.initiator == *from => {
                s.status = ExchangeStatus::Failed(wire_code);
                Vec::new()
            }
            _ => Vec::new(),
        }
    }

    // ---- traffic --------------------------------------------------------

    /// Seals application bytes for `peer` under the completed session.
    pub fn send_data(&mut self, peer: &EntityId, payload: &[u8]) -> Result<Outgoing, ProtocolError> {
        let s = self.sessions.get_mut(peer).ok_or_else(|| ProtocolError::NoSession(peer.clone()))?;
        let bytes = s.session_send(self.provider.as_ref(), payload)?;
        self.metrics.aead_seal_count += 1;
        Ok(self.emit(peer, bytes))
    }

    fn on_data(&mut self, msg: &WireMessage, raw: &[u8]) -> Vec<Outgoing> {
        let from = msg.header.sender.clone();
        let r = match self.sessions.get_mut(&from) {
            Some(s) => s.session_recv(self.provider.as_ref(), raw),
            None => Err(ProtocolError::NoSession(from.clone())),
        };
        self.note_open(&r);
        match r {
            Ok(p) => {
                self.inbox.push((from, p));
                Vec::new()
            }
            Err(e) => {
                let code = match e {
                    ProtocolError::StaleSequence { .. } => ErrorCode::ReplayDetected,
                    _ => ErrorCode::AuthFailure,
                };
                let reply = ErrorReply { code, exchange: None, about: Some(&from), reason: e.to_string() };
                self.faults.push(e);
                vec![self.error_to(&from, reply)]
            }
        }
    }

    // ---- head links -----------------------------------------------------

    /// Turns the completed session with head `peer` into a direct link.
    /// Returns the link key so the registry can record it.
    pub fn promote_head_link(&mut self, peer: &EntityId) -> Result<SymKey, ProtocolError> {
        let s = self.sessions.get(peer).ok_or_else(|| ProtocolError::NoSession(peer.clone()))?;
        let key = derive_head_link_key(self.provider.as_ref(), s.key(), &self.id, peer, &self.label)?;
        self.kdf_tick();
        self.links.insert(peer.clone(), LinkSession::peer(self.id.clone(), peer.clone(), key.clone(), self.now));
        Ok(key)
    }

    // ---- dispatch -------------------------------------------------------

    /// Processes one delivered message.
    pub fn handle(&mut self, bytes: &[u8], topo: &Topology) -> Vec<Outgoing> {
        self.metrics.msgs_received += 1;
        let msg = match wire::decode(bytes) {
            Ok(m) => m,
            Err(e) => {
                self.faults.push(e.into());
                return Vec::new();
            }
        };
        if msg.header.receiver != self.id {
            self.faults.push(ProtocolError::Unexpected(format!("message for {}", msg.header.receiver)));
            return Vec::new();
        }
        let from = msg.header.sender.clone();
        match &msg.body {
            Body::Hello { nonce_c } => self.on_hello(&from, *nonce_c, topo),
            Body::LinkChallenge { .. } => self.on_challenge(&msg),
            Body::LinkFinish { .. } => self.on_finish(&msg),
            Body::Relay { .. } => self.on_relay(&msg, topo),
            Body::E2eConfirm { .. } => self.on_confirm(&msg),
            Body::Data { .. } => self.on_data(&msg, bytes),
            Body::Error { code, detail } => self.on_error(&from, *code, detail.clone()),
        }
    }

    /// Timer expiry: fails pending exchanges (all, or the one named) and
    /// pending handshakes.
    pub fn expire(&mut self, only: Option<&ExchangeId>) {
        for s in self.exchanges.values_mut() {
            if s.status.is_pending() && only.is_none_or(|x| *x == s.exchange_id) {
                s.status = ExchangeStatus::Failed(None);
            }
        }
        if only.is_none() {
            for h in self.handshakes.values_mut() {
                if matches!(h.status, HandshakeStatus::AwaitingChallenge | HandshakeStatus::AwaitingFinish) {
                    h.status = HandshakeStatus::Failed(None);
                }
            }
        }
        self.faults.push(ProtocolError::Timeout);
    }
}
