//! The trust overlay: who is registered, under whom, with which keys.
//!
//! Heads register cluster heads and nodes, the district mediator registers
//! heads. A node is bound to one or more cluster heads of its own head by a
//! binding key derived from its master key, so the node never holds a
//! second secret. Mediation paths are computed from this registry alone.

mod keystore;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::crypto::{self, CryptoError, CryptoProvider, KdfLabel, RandomSource, SymKey};

pub use keystore::{
    decode_keystore, encode_keystore, read_keystore, write_keystore, FormatError, KeystoreContents, KeystoreError,
};

pub const PROTOCOL_VERSION: u8 = 1;
pub const MAX_ID_LEN: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HierarchyError {
    #[error("invalid entity id {0:?}")]
    InvalidId(String),
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
    #[error("entity {0} is revoked")]
    RevokedEntity(EntityId),
    #[error("entity {0} is already registered")]
    DuplicateRegistration(EntityId),
    #[error("installation is sealed; cannot register {0}")]
    InstallationSealed(EntityId),
    #[error("{registrar_role} may not register a {child_role}")]
    RoleViolation { registrar_role: Role, child_role: Role },
    #[error("registrar {0} is revoked")]
    RegistrarRevoked(EntityId),
    #[error("{registrar} is not the registrar of {id}")]
    NotRegistrar { registrar: EntityId, id: EntityId },
    #[error("entity {0} is already revoked")]
    AlreadyRevoked(EntityId),
    #[error("{node} and {ch} are under different heads")]
    CrossHeadAssociation { node: EntityId, ch: EntityId },
    #[error("no common mediator between {0} and {1}")]
    NoCommonMediator(EntityId, EntityId),
    #[error("path from an entity to itself")]
    SelfPath,
    #[error("no key shared between {0} and {1}")]
    NotAdjacent(EntityId, EntityId),
    #[error("no peer key for {0} and {1}")]
    NotFound(EntityId, EntityId),
    #[error("unknown crypto suite {0:?}")]
    UnknownSuite(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Entity identifier: 1..=64 bytes of `[A-Za-z0-9_.-]`, case-sensitive.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct EntityId(String);

impl EntityId {
    pub fn new(id: impl Into<String>) -> Result<Self, HierarchyError> {
        let id = id.into();
        let ok = !id.is_empty()
            && id.len() <= MAX_ID_LEN
            && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'));
        if ok {
            Ok(Self(id))
        } else {
            Err(HierarchyError::InvalidId(id))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }
}

impl FromStr for EntityId {
    type Err = HierarchyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize)]
pub enum Role {
    Node,
    ClusterHead,
    Head,
    DistrictMediator,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Node => 0,
            Role::ClusterHead => 1,
            Role::Head => 2,
            Role::DistrictMediator => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Role::Node,
            1 => Role::ClusterHead,
            2 => Role::Head,
            3 => Role::DistrictMediator,
            _ => return None,
        })
    }

    pub fn short(self) -> &'static str {
        match self {
            Role::Node => "N",
            Role::ClusterHead => "CH",
            Role::Head => "H",
            Role::DistrictMediator => "DM",
        }
    }

    pub fn is_mediator(self) -> bool {
        !matches!(self, Role::Node)
    }

    /// Whether `self` may register an entity of role `child`.
    pub fn may_register(self, child: Role) -> bool {
        matches!(
            (self, child),
            (Role::Head, Role::ClusterHead) | (Role::Head, Role::Node) | (Role::DistrictMediator, Role::Head)
        )
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
pub enum Status {
    Active,
    Revoked,
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Active => 0,
            Status::Revoked => 1,
        }
    }
}

/// Parameters published by the trusted authority at setup.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct NetworkParams {
    pub protocol_version: u8,
    pub suite_id: String,
    pub deployment_label: Vec<u8>,
}

/// Trusted-authority setup. Pure function of its inputs.
pub fn ta_setup(suite_id: &str, deployment_label: &[u8]) -> Result<NetworkParams, HierarchyError> {
    if crypto::provider_for_suite(suite_id).is_none() {
        return Err(HierarchyError::UnknownSuite(suite_id.to_owned()));
    }
    Ok(NetworkParams {
        protocol_version: PROTOCOL_VERSION,
        suite_id: suite_id.to_owned(),
        deployment_label: deployment_label.to_vec(),
    })
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RegistryEntry {
    pub id: EntityId,
    pub role: Role,
    /// `None` for roots (the district mediator, or heads of an in-home deployment).
    pub registrar: Option<EntityId>,
    /// Registrar-side copy of the master key; deleted on revocation.
    pub master_key: Option<SymKey>,
    pub status: Status,
    pub associated_chs: Vec<EntityId>,
}

impl RegistryEntry {
    pub fn is_active(&self) -> bool {
        self.status == Status::Active
    }
}

/// Out-of-band delivery of a freshly created master key (the QR-code step).
#[derive(Clone, Debug)]
pub struct MasterKeyReceipt {
    pub child: EntityId,
    pub registrar: EntityId,
    pub master_key: SymKey,
}

/// Binding key handed to a cluster head; the node derives the same key itself.
#[derive(Clone, Debug)]
pub struct BindingReceipt {
    pub node: EntityId,
    pub ch: EntityId,
    pub key: SymKey,
}

/// `BK(node, ch) = KDF(MK_node, "bind-v1", [node, ch, deployment_label])`.
pub fn derive_binding_key(
    provider: &dyn CryptoProvider,
    node_master: &SymKey,
    node: &EntityId,
    ch: &EntityId,
    deployment_label: &[u8],
) -> Result<SymKey, CryptoError> {
    provider.kdf(node_master.as_bytes(), KdfLabel::Bind, &[node.as_bytes(), ch.as_bytes(), deployment_label])
}

/// A resolved mediation path.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TrustPath {
    pub hops: Vec<EntityId>,
    /// The path crosses a head-to-head hop whose peer key does not exist yet.
    pub requires_head_link: bool,
}

impl TrustPath {
    pub fn initiator(&self) -> &EntityId {
        &self.hops[0]
    }

    pub fn responder(&self) -> &EntityId {
        self.hops.last().expect("paths have at least two hops")
    }

    /// Number of links (`hops - 1`).
    pub fn links(&self) -> usize {
        self.hops.len() - 1
    }

    pub fn mediators(&self) -> &[EntityId] {
        &self.hops[1..self.hops.len() - 1]
    }

    pub fn position(&self, id: &EntityId) -> Option<usize> {
        self.hops.iter().position(|h| h == id)
    }

    pub fn reversed(&self) -> TrustPath {
        let mut hops = self.hops.clone();
        hops.reverse();
        TrustPath { hops, requires_head_link: self.requires_head_link }
    }
}

impl fmt::Display for TrustPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hops: Vec<&str> = self.hops.iter().map(EntityId::as_str).collect();
        f.write_str(&hops.join(" -> "))
    }
}

fn ordered_pair(a: &EntityId, b: &EntityId) -> (EntityId, EntityId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum PathMode {
    Strict,
    Structural,
}

/// Registry plus the overlay's peer-key bookkeeping.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Topology {
    params: NetworkParams,
    entries: BTreeMap<EntityId, RegistryEntry>,
    peer_keys: BTreeMap<(EntityId, EntityId), SymKey>,
    sealed: bool,
}

impl Topology {
    pub fn new(params: NetworkParams) -> Self {
        Self { params, entries: BTreeMap::new(), peer_keys: BTreeMap::new(), sealed: false }
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn entries(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.entries.values()
    }

    pub fn peer_keys(&self) -> impl Iterator<Item = (&(EntityId, EntityId), &SymKey)> {
        self.peer_keys.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &EntityId) -> Result<&RegistryEntry, HierarchyError> {
        self.entries.get(id).ok_or_else(|| HierarchyError::UnknownEntity(id.clone()))
    }

    fn get_active(&self, id: &EntityId) -> Result<&RegistryEntry, HierarchyError> {
        let e = self.get(id)?;
        if e.is_active() {
            Ok(e)
        } else {
            Err(HierarchyError::RevokedEntity(id.clone()))
        }
    }

    pub fn contains(&self, id: &EntityId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn is_active(&self, id: &EntityId) -> bool {
        self.entries.get(id).is_some_and(RegistryEntry::is_active)
    }

    pub fn district_mediator(&self) -> Option<&EntityId> {
        self.entries.values().find(|e| e.role == Role::DistrictMediator).map(|e| &e.id)
    }

    /// Closes the installation phase: no new identities after this point.
    pub fn seal_installation(&mut self) {
        self.sealed = true;
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    fn check_new_id(&self, id: &EntityId) -> Result<(), HierarchyError> {
        if self.entries.contains_key(id) {
            return Err(HierarchyError::DuplicateRegistration(id.clone()));
        }
        if self.sealed {
            return Err(HierarchyError::InstallationSealed(id.clone()));
        }
        Ok(())
    }

    /// Installs a trust anchor: the district mediator, or a head in a
    /// deployment without one.
    pub fn install_root(&mut self, id: EntityId, role: Role) -> Result<(), HierarchyError> {
        self.check_new_id(&id)?;
        let has_dm = self.district_mediator().is_some();
        let has_root_head = self.entries.values().any(|e| e.role == Role::Head && e.registrar.is_none());
        let legal = match role {
            Role::DistrictMediator => !has_dm && !has_root_head,
            Role::Head => !has_dm,
            _ => false,
        };
        if !legal {
            // A root has no registrar; report it as the TA-level role clash.
            return Err(HierarchyError::RoleViolation {
                registrar_role: if has_dm { Role::DistrictMediator } else { Role::Head },
                child_role: role,
            });
        }
        self.entries.insert(
            id.clone(),
            RegistryEntry {
                id,
                role,
                registrar: None,
                master_key: None,
                status: Status::Active,
                associated_chs: Vec::new(),
            },
        );
        Ok(())
    }

    /// Registers `child` under `registrar` and issues its master key.
    pub fn register(
        &mut self,
        registrar: &EntityId,
        child: EntityId,
        role: Role,
        rng: &mut dyn RandomSource,
    ) -> Result<MasterKeyReceipt, HierarchyError> {
        if self.entries.contains_key(&child) {
            return Err(HierarchyError::DuplicateRegistration(child));
        }
        let reg = self.get(registrar)?;
        if !reg.is_active() {
            return Err(HierarchyError::RegistrarRevoked(registrar.clone()));
        }
        if !reg.role.may_register(role) {
            return Err(HierarchyError::RoleViolation { registrar_role: reg.role, child_role: role });
        }
        self.check_new_id(&child)?;
        let mut raw = [0u8; crypto::KEY_LEN];
        rng.fill(&mut raw);
        let master_key = SymKey::from_bytes(raw);
        self.entries.insert(
            child.clone(),
            RegistryEntry {
                id: child.clone(),
                role,
                registrar: Some(registrar.clone()),
                master_key: Some(master_key.clone()),
                status: Status::Active,
                associated_chs: Vec::new(),
            },
        );
        Ok(MasterKeyReceipt { child, registrar: registrar.clone(), master_key })
    }

    /// Binds `node` to cluster head `ch`, both registered under `head`.
    pub fn associate(
        &mut self,
        provider: &dyn CryptoProvider,
        head: &EntityId,
        node: &EntityId,
        ch: &EntityId,
    ) -> Result<BindingReceipt, HierarchyError> {
        let n = self.get_active(node)?;
        if n.role != Role::Node {
            return Err(HierarchyError::RoleViolation { registrar_role: Role::Head, child_role: n.role });
        }
        if n.registrar.as_ref() != Some(head) {
            return Err(HierarchyError::NotRegistrar { registrar: head.clone(), id: node.clone() });
        }
        let c = self.get_active(ch)?;
        if c.role != Role::ClusterHead {
            return Err(HierarchyError::RoleViolation { registrar_role: Role::Head, child_role: c.role });
        }
        if c.registrar != n.registrar {
            return Err(HierarchyError::CrossHeadAssociation { node: node.clone(), ch: ch.clone() });
        }
        let mk = n.master_key.clone().ok_or_else(|| HierarchyError::RevokedEntity(node.clone()))?;
        let key = derive_binding_key(provider, &mk, node, ch, &self.params.deployment_label)?;
        let entry = self.entries.get_mut(node).expect("checked above");
        if !entry.associated_chs.contains(ch) {
            entry.associated_chs.push(ch.clone());
        }
        Ok(BindingReceipt { node: node.clone(), ch: ch.clone(), key })
    }

    /// Deletes `id`'s registration key. The entry stays as a tombstone.
    pub fn revoke(&mut self, registrar: &EntityId, id: &EntityId) -> Result<(), HierarchyError> {
        let e = self.get(id)?;
        if !e.is_active() {
            return Err(HierarchyError::AlreadyRevoked(id.clone()));
        }
        if e.registrar.as_ref() != Some(registrar) {
            return Err(HierarchyError::NotRegistrar { registrar: registrar.clone(), id: id.clone() });
        }
        let entry = self.entries.get_mut(id).expect("checked above");
        entry.status = Status::Revoked;
        entry.master_key = None;
        self.peer_keys.retain(|(a, b), _| a != id && b != id);
        for e in self.entries.values_mut() {
            e.associated_chs.retain(|c| c != id);
        }
        Ok(())
    }

    pub fn record_peer_key(&mut self, a: &EntityId, b: &EntityId, key: SymKey) -> Result<(), HierarchyError> {
        self.get_active(a)?;
        self.get_active(b)?;
        self.peer_keys.insert(ordered_pair(a, b), key);
        Ok(())
    }

    pub fn lookup_peer_key(&self, a: &EntityId, b: &EntityId) -> Result<&SymKey, HierarchyError> {
        self.get(a)?;
        self.get(b)?;
        self.peer_keys.get(&ordered_pair(a, b)).ok_or_else(|| HierarchyError::NotFound(a.clone(), b.clone()))
    }

    /// The key `parent` holds for its link with `child`, as seen from the
    /// parent's (registrar or cluster head) keystore.
    pub fn parent_side_key(
        &self,
        provider: &dyn CryptoProvider,
        child: &EntityId,
        parent: &EntityId,
    ) -> Result<SymKey, HierarchyError> {
        let p = self.get_active(parent)?;
        let c = self.get_active(child)?;
        if c.registrar.as_ref() == Some(parent) {
            return c.master_key.clone().ok_or_else(|| HierarchyError::RevokedEntity(child.clone()));
        }
        if c.role == Role::Node && p.role == Role::ClusterHead && c.associated_chs.contains(parent) {
            let mk = c.master_key.as_ref().ok_or_else(|| HierarchyError::RevokedEntity(child.clone()))?;
            return Ok(derive_binding_key(provider, mk, child, parent, &self.params.deployment_label)?);
        }
        Err(HierarchyError::NotAdjacent(child.clone(), parent.clone()))
    }

    /// Whether `child` links upward to `parent` through registration or binding.
    pub fn is_parent_of(&self, parent: &EntityId, child: &EntityId) -> bool {
        match self.entries.get(child) {
            Some(c) => c.registrar.as_ref() == Some(parent) || c.associated_chs.contains(parent),
            None => false,
        }
    }

    /// Minimal mediation path between two active entities.
    pub fn resolve_path(&self, a: &EntityId, b: &EntityId) -> Result<TrustPath, HierarchyError> {
        self.route(a, b, PathMode::Strict)
    }

    /// Same shape as [`resolve_path`](Self::resolve_path) but ignores
    /// revocation status. This is what an endpoint without access to the
    /// registrars' revocation state can compute; mediators re-check strictly.
    pub fn route_hint(&self, a: &EntityId, b: &EntityId) -> Result<TrustPath, HierarchyError> {
        self.route(a, b, PathMode::Structural)
    }

    fn up_parent(&self, e: &RegistryEntry) -> Option<EntityId> {
        match e.role {
            Role::Node => e.associated_chs.iter().min().cloned(),
            _ => e.registrar.clone(),
        }
    }

    fn up_chain(&self, id: &EntityId) -> Result<Vec<EntityId>, HierarchyError> {
        let mut chain = vec![id.clone()];
        let mut cur = self.get(id)?;
        while let Some(p) = self.up_parent(cur) {
            if chain.contains(&p) {
                break;
            }
            chain.push(p.clone());
            cur = self.get(&p)?;
        }
        Ok(chain)
    }

    fn route(&self, a: &EntityId, b: &EntityId, mode: PathMode) -> Result<TrustPath, HierarchyError> {
        if a == b {
            return Err(HierarchyError::SelfPath);
        }
        let ea = self.get(a)?;
        let eb = self.get(b)?;
        if mode == PathMode::Strict {
            for e in [ea, eb] {
                if !e.is_active() {
                    return Err(HierarchyError::RevokedEntity(e.id.clone()));
                }
            }
        }

        let hops = if ea.role == Role::Node && eb.role == Role::Node {
            let shared = ea.associated_chs.iter().filter(|c| eb.associated_chs.contains(c)).min();
            shared.map(|ch| vec![a.clone(), ch.clone(), b.clone()])
        } else if (ea.role == Role::Node && eb.role == Role::ClusterHead && ea.associated_chs.contains(b))
            || (eb.role == Role::Node && ea.role == Role::ClusterHead && eb.associated_chs.contains(a))
        {
            Some(vec![a.clone(), b.clone()])
        } else {
            None
        };

        let (hops, head_link) = match hops {
            Some(h) => (h, None),
            None => self.route_via_ancestors(a, b)?,
        };

        if mode == PathMode::Strict {
            for h in &hops {
                self.get_active(h)?;
            }
        }
        let requires_head_link = match &head_link {
            Some((ha, hb)) => !self.peer_keys.contains_key(&ordered_pair(ha, hb)),
            None => false,
        };
        Ok(TrustPath { hops, requires_head_link })
    }

    #[allow(clippy::type_complexity)]
    fn route_via_ancestors(
        &self,
        a: &EntityId,
        b: &EntityId,
    ) -> Result<(Vec<EntityId>, Option<(EntityId, EntityId)>), HierarchyError> {
        let up_a = self.up_chain(a)?;
        let up_b = self.up_chain(b)?;
        let no_common = || HierarchyError::NoCommonMediator(a.clone(), b.clone());
        let (i, j) = up_a
            .iter()
            .enumerate()
            .find_map(|(i, x)| up_b.iter().position(|y| y == x).map(|j| (i, j)))
            .ok_or_else(no_common)?;

        let lca = self.get(&up_a[i])?;
        let role_a = self.get(a)?.role;
        let role_b = self.get(b)?.role;
        let both_heads = role_a == Role::Head && role_b == Role::Head;
        if lca.role == Role::DistrictMediator && i > 0 && j > 0 && !both_heads {
            // Cross-house: replace the district hop with the head-to-head link.
            let ha = up_a[i - 1].clone();
            let hb = up_b[j - 1].clone();
            let mut hops: Vec<EntityId> = up_a[..i].to_vec();
            hops.extend(up_b[..j].iter().rev().cloned());
            return Ok((hops, Some((ha, hb))));
        }
        let mut hops: Vec<EntityId> = up_a[..=i].to_vec();
        hops.extend(up_b[..j].iter().rev().cloned());
        Ok((hops, None))
    }

    /// Checks the structural invariants of a path: no repeats, and every
    /// adjacent pair holds a registration, binding, or peer key.
    pub fn validate_path(&self, path: &TrustPath) -> Result<(), String> {
        if path.hops.len() < 2 {
            return Err("path shorter than two hops".into());
        }
        for (i, h) in path.hops.iter().enumerate() {
            if path.hops[..i].contains(h) {
                return Err(format!("{h} appears twice"));
            }
        }
        for w in path.hops.windows(2) {
            let (x, y) = (&w[0], &w[1]);
            let keyed =
                self.is_parent_of(x, y) || self.is_parent_of(y, x) || self.peer_keys.contains_key(&ordered_pair(x, y));
            let pending_head_link = path.requires_head_link
                && self.entries.get(x).is_some_and(|e| e.role == Role::Head)
                && self.entries.get(y).is_some_and(|e| e.role == Role::Head);
            if !keyed && !pending_head_link {
                return Err(format!("no key between {x} and {y}"));
            }
        }
        Ok(())
    }

    pub fn save_keystore(&self, path: &Path) -> Result<(), KeystoreError> {
        let provider = crypto::provider_for_suite(&self.params.suite_id)
            .ok_or_else(|| KeystoreError::Format(FormatError::UnknownSuite(self.params.suite_id.clone())))?;
        write_keystore(path, provider.as_ref(), &self.to_keystore())
    }

    /// Reloads a keystore. Parameters are published by the TA, not stored.
    pub fn load_keystore(path: &Path, params: NetworkParams) -> Result<Topology, KeystoreError> {
        let provider = crypto::provider_for_suite(&params.suite_id)
            .ok_or_else(|| KeystoreError::Format(FormatError::UnknownSuite(params.suite_id.clone())))?;
        let contents = read_keystore(path, provider.as_ref())?;
        Ok(Topology::from_keystore(params, contents))
    }

    pub fn to_keystore(&self) -> KeystoreContents {
        KeystoreContents {
            entries: self.entries.values().cloned().collect(),
            peer_keys: self.peer_keys.iter().map(|((a, b), k)| (a.clone(), b.clone(), k.clone())).collect(),
        }
    }

    pub fn from_keystore(params: NetworkParams, contents: KeystoreContents) -> Topology {
        let mut t = Topology::new(params);
        for e in contents.entries {
            t.entries.insert(e.id.clone(), e);
        }
        for (a, b, k) in contents.peer_keys {
            t.peer_keys.insert(ordered_pair(&a, &b), k);
        }
        t
    }
}
