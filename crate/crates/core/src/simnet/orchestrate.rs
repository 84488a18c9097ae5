//! Scripted flows on top of the event loop: registration, link warm-up,
//! establishment, head links and application traffic.

use std::collections::BTreeMap;

use crate::crypto::DetRng;
use crate::hierarchy::{EntityId, HierarchyError, Role, TrustPath};
use crate::protocol::{
    EntityMetrics, EntityRuntime, ErrorCode, ExchangeRole, ExchangeStatus, HandshakeStatus, ProtocolError,
};
use crate::wire::{self, Body, ExchangeId};

use super::{Disposition, SimError, Simulator};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EstablishStatus {
    Complete,
    /// The initiator sent its confirmation but the responder never accepted it.
    Unconfirmed,
    Failed,
}

/// Result of one `establish` call, with its message accounting.
#[derive(Clone, Debug)]
pub struct EstablishOutcome {
    pub initiator: EntityId,
    pub responder: EntityId,
    pub path: Option<TrustPath>,
    pub exchange_id: Option<ExchangeId>,
    pub status: EstablishStatus,
    pub error_code: Option<u16>,
    pub error_name: Option<String>,
    /// Messages of the exchange itself (2L + 1 when honest).
    pub exchange_msgs: usize,
    /// Messages of a head-link establishment run first, if any.
    pub head_link_msgs: usize,
    /// Link handshake messages spent warming cold links.
    pub handshake_msgs: usize,
    /// Per-entity counter growth during the exchange phase.
    pub metrics: BTreeMap<EntityId, EntityMetrics>,
    /// Both ends hold the same session key.
    pub keys_match: bool,
}

impl EstablishOutcome {
    fn failed(a: &EntityId, b: &EntityId, err: &ProtocolError) -> Self {
        let mut o = Self::empty(a, b);
        o.error_code = err.code().map(|c| c as u16);
        o.error_name = Some(err.name());
        o
    }

    fn empty(a: &EntityId, b: &EntityId) -> Self {
        Self {
            initiator: a.clone(),
            responder: b.clone(),
            path: None,
            exchange_id: None,
            status: EstablishStatus::Failed,
            error_code: None,
            error_name: None,
            exchange_msgs: 0,
            head_link_msgs: 0,
            handshake_msgs: 0,
            metrics: BTreeMap::new(),
            keys_match: false,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.status == EstablishStatus::Complete
    }

    /// Head-link plus exchange messages; handshakes are counted apart.
    pub fn total_msgs(&self) -> usize {
        self.head_link_msgs + self.exchange_msgs
    }

    pub fn links(&self) -> Option<usize> {
        self.path.as_ref().map(TrustPath::links)
    }

    pub fn aead_ops(&self, id: &EntityId) -> u64 {
        self.metrics.get(id).map_or(0, EntityMetrics::aead_ops)
    }

    /// Sum of AEAD operations over the path's mediators.
    pub fn mediator_aead_total(&self) -> u64 {
        self.path.as_ref().map_or(0, |p| p.mediators().iter().map(|m| self.aead_ops(m)).sum())
    }
}

fn error_code_in(bytes: &[u8]) -> Option<u16> {
    match wire::decode(bytes).ok()?.body {
        Body::Error { code, .. } => Some(code),
        _ => None,
    }
}

fn code_name(code: u16) -> String {
    ErrorCode::from_u16(code).map_or_else(|| format!("0x{code:04x}"), |c| c.name().to_owned())
}

impl Simulator {
    fn add_runtime(&mut self, id: &EntityId, role: Role) -> &mut EntityRuntime {
        let rng = DetRng::derive(self.seed, id.as_str());
        let rt = EntityRuntime::new(id.clone(), role, self.topology.params(), self.provider.clone(), Box::new(rng));
        self.runtimes.entry(id.clone()).or_insert(rt)
    }

    /// Installs a trust anchor (district mediator, or a stand-alone head).
    pub fn install_root(&mut self, id: &EntityId, role: Role) -> Result<(), SimError> {
        self.topology.install_root(id.clone(), role)?;
        self.add_runtime(id, role);
        Ok(())
    }

    /// Registers `child` under `registrar` and hands it its master key.
    pub fn register(&mut self, registrar: &EntityId, child: &EntityId, role: Role) -> Result<(), SimError> {
        let receipt = self.topology.register(registrar, child.clone(), role, &mut self.registrar_rng)?;
        self.add_runtime(child, role).accept_master_key(&receipt);
        Ok(())
    }

    /// Binds `node` to cluster head `ch` (the node's head does this).
    pub fn associate(&mut self, node: &EntityId, ch: &EntityId) -> Result<(), SimError> {
        let head = self
            .topology
            .get(node)?
            .registrar
            .clone()
            .ok_or(HierarchyError::RoleViolation { registrar_role: Role::Head, child_role: Role::Node })?;
        self.topology.associate(self.provider.as_ref(), &head, node, ch)?;
        Ok(())
    }

    /// Revocation by `id`'s own registrar.
    pub fn revoke(&mut self, id: &EntityId) -> Result<(), SimError> {
        let registrar = self
            .topology
            .get(id)?
            .registrar
            .clone()
            .ok_or_else(|| HierarchyError::NotRegistrar { registrar: id.clone(), id: id.clone() })?;
        self.topology.revoke(&registrar, id)?;
        Ok(())
    }

    pub fn seal_installation(&mut self) {
        self.topology.seal_installation();
    }

    fn linked(&self, a: &EntityId, b: &EntityId) -> bool {
        let has = |x: &EntityId, y: &EntityId| self.runtimes.get(x).is_some_and(|r| r.link(y).is_some());
        has(a, b) && has(b, a)
    }

    /// Runs the link handshake between overlay neighbours `a` and `b` if
    /// they hold no link yet. Returns the number of handshake messages.
    pub fn warm_link(&mut self, a: &EntityId, b: &EntityId) -> Result<usize, SimError> {
        if self.linked(a, b) {
            return Ok(0);
        }
        let (child, parent) = if self.topology.is_parent_of(b, a) {
            (a.clone(), b.clone())
        } else if self.topology.is_parent_of(a, b) {
            (b.clone(), a.clone())
        } else {
            return Err(HierarchyError::NotAdjacent(a.clone(), b.clone()).into());
        };
        let start = self.transcript.len();
        let rt = self.runtimes.get_mut(&child).ok_or_else(|| SimError::NoRuntime(child.clone()))?;
        rt.set_clock(self.now);
        let out = rt.start_handshake(&parent, &self.topology)?;
        self.dispatch(&child, out);
        self.run_until_idle()?;
        let msgs = self.transcript.len() - start;
        if self.linked(a, b) {
            return Ok(msgs);
        }
        let status = self.runtimes[&child].handshake_status(&parent);
        let reason = match status {
            Some(HandshakeStatus::Failed(Some(c))) => format!("0x{:04x}", c as u16),
            other => format!("{other:?}"),
        };
        Err(SimError::LinkFailed(child, parent, reason))
    }

    /// Warms every link of `path` between active entities, except a
    /// head-to-head hop.
    fn warm_path(&mut self, path: &TrustPath) -> Result<usize, SimError> {
        let mut msgs = 0;
        for w in path.hops.windows(2) {
            let (x, y) = (&w[0], &w[1]);
            if !self.topology.is_active(x) || !self.topology.is_active(y) {
                continue;
            }
            if self.topology.is_parent_of(x, y) || self.topology.is_parent_of(y, x) {
                msgs += self.warm_link(x, y)?;
            }
        }
        Ok(msgs)
    }

    fn link_failure(&self, a: &EntityId, b: &EntityId, e: SimError, handshake_msgs: usize) -> EstablishOutcome {
        let mut o = EstablishOutcome::empty(a, b);
        o.handshake_msgs = handshake_msgs;
        match &e {
            SimError::LinkFailed(..) => {
                // Report the code the parent answered with.
                let code = self.transcript.iter().rev().find_map(|r| error_code_in(&r.bytes));
                o.error_code = code;
                o.error_name = Some(code.map_or_else(|| "LinkFailed".to_owned(), code_name));
            }
            SimError::Protocol(p) => {
                o.error_code = p.code().map(|c| c as u16);
                o.error_name = Some(p.name());
            }
            SimError::Hierarchy(h) => {
                o.error_code = ProtocolError::Hierarchy(h.clone()).code().map(|c| c as u16);
                o.error_name = Some(crate::protocol::hierarchy_error_name(h).to_owned());
            }
            other => o.error_name = Some(other.to_string()),
        }
        o
    }

    /// One exchange over warm links, from `Request` to `Confirm`.
    fn run_exchange(&mut self, a: &EntityId, b: &EntityId, path: TrustPath) -> EstablishOutcome {
        let mut o = EstablishOutcome::empty(a, b);
        o.path = Some(path);
        let before = self.snapshot_metrics();
        let start = self.transcript.len();
        let Some(rt) = self.runtimes.get_mut(a) else {
            return EstablishOutcome::failed(a, b, &ProtocolError::UnknownEntity(a.clone()));
        };
        rt.set_clock(self.now);
        let (xid, out) = match rt.initiate(b, &self.topology) {
            Ok(v) => v,
            Err(e) => {
                let mut f = EstablishOutcome::failed(a, b, &e);
                f.path = o.path;
                return f;
            }
        };
        o.exchange_id = Some(xid);
        self.dispatch(a, out);
        if let Err(e) = self.run_until_idle() {
            o.error_name = Some(e.to_string());
            return o;
        }

        let segment = &self.transcript[start..];
        o.exchange_msgs = segment.iter().filter(|r| r.disposition != Disposition::Injected).count();
        let after = self.snapshot_metrics();
        o.metrics = after
            .iter()
            .map(|(id, m)| (id.clone(), m.since(before.get(id).unwrap_or(&EntityMetrics::default()))))
            .filter(|(_, m)| *m != EntityMetrics::default())
            .collect();

        let init_status = self.runtimes[a].exchange(a, &xid).map(|s| s.status);
        let resp_status = self.runtimes.get(b).and_then(|r| r.exchange(a, &xid)).map(|s| s.status);
        let wire_error = segment.iter().find_map(|r| error_code_in(&r.bytes));
        match (init_status, resp_status) {
            (Some(ExchangeStatus::Complete), Some(ExchangeStatus::Complete)) => {
                o.status = EstablishStatus::Complete;
                let ka = self.runtimes[a].session(b).map(|s| s.key().clone());
                let kb = self.runtimes[b].session(a).map(|s| s.key().clone());
                o.keys_match = ka.is_some() && ka == kb;
            }
            (Some(ExchangeStatus::Complete), _) => {
                o.status = EstablishStatus::Unconfirmed;
                o.error_code = wire_error;
                o.error_name = Some("Unconfirmed".into());
            }
            (init, _) => {
                o.status = EstablishStatus::Failed;
                let local = match init {
                    Some(ExchangeStatus::Failed(Some(c))) => Some(c as u16),
                    _ => None,
                };
                o.error_code = local.or(wire_error);
                o.error_name = Some(match (o.error_code, init) {
                    (Some(c), _) => code_name(c),
                    (None, Some(ExchangeStatus::Failed(None))) => "Timeout".into(),
                    _ => "NoResponse".into(),
                });
            }
        }
        o
    }

    /// Makes sure heads `ha` and `hb` share a direct link, running an
    /// exchange through the district mediator when they do not.
    pub fn ensure_head_link(&mut self, ha: &EntityId, hb: &EntityId) -> EstablishOutcome {
        if self.topology.lookup_peer_key(ha, hb).is_ok() && self.linked(ha, hb) {
            let mut o = EstablishOutcome::empty(ha, hb);
            o.status = EstablishStatus::Complete;
            o.keys_match = true;
            return o;
        }
        let mut o = self.establish_inner(ha, hb);
        if !o.is_complete() {
            return o;
        }
        let mut keys = Vec::new();
        for (x, y) in [(ha, hb), (hb, ha)] {
            let rt = self.runtimes.get_mut(x).expect("completed exchange has runtimes");
            rt.set_clock(self.now);
            match rt.promote_head_link(y) {
                Ok(k) => keys.push(k),
                Err(e) => return EstablishOutcome::failed(ha, hb, &e),
            }
        }
        if keys[0] != keys[1] {
            o.status = EstablishStatus::Failed;
            o.error_name = Some("KeyMismatch".into());
            return o;
        }
        if let Err(e) = self.topology.record_peer_key(ha, hb, keys.swap_remove(0)) {
            return EstablishOutcome::failed(ha, hb, &e.into());
        }
        o
    }

    fn establish_inner(&mut self, a: &EntityId, b: &EntityId) -> EstablishOutcome {
        let hint = match self.topology.route_hint(a, b) {
            Ok(p) => p,
            Err(e) => return EstablishOutcome::failed(a, b, &e.into()),
        };
        let mut head_link = None;
        if hint.requires_head_link {
            let pair = hint
                .hops
                .windows(2)
                .find(|w| w.iter().all(|h| self.topology.get(h).is_ok_and(|e| e.role == Role::Head)));
            if let Some(w) = pair {
                let (ha, hb) = (w[0].clone(), w[1].clone());
                let hl = self.ensure_head_link(&ha, &hb);
                if !hl.is_complete() {
                    let mut o = hl;
                    o.head_link_msgs = o.exchange_msgs;
                    o.exchange_msgs = 0;
                    o.initiator = a.clone();
                    o.responder = b.clone();
                    o.path = Some(hint);
                    return o;
                }
                head_link = Some(hl);
            }
        }
        let handshake_msgs = match self.warm_path(&hint) {
            Ok(n) => n,
            Err(e) => return self.link_failure(a, b, e, 0),
        };
        let mut o = self.run_exchange(a, b, hint);
        o.handshake_msgs += handshake_msgs;
        if let Some(hl) = head_link {
            o.head_link_msgs = hl.total_msgs();
            o.handshake_msgs += hl.handshake_msgs;
        }
        o
    }

    /// Establishes an end-to-end key between `a` and `b`, warming cold
    /// links and the head link as needed.
    pub fn establish(&mut self, a: &EntityId, b: &EntityId) -> EstablishOutcome {
        self.establish_inner(a, b)
    }

    /// Sends application bytes on the `a`→`b` session. Returns whether
    /// `b` accepted them.
    pub fn send_traffic(&mut self, a: &EntityId, b: &EntityId, payload: &[u8]) -> Result<bool, SimError> {
        let rt = self.runtimes.get_mut(a).ok_or_else(|| SimError::NoRuntime(a.clone()))?;
        rt.set_clock(self.now);
        let out = rt.send_data(b, payload)?;
        self.send(a, &out.to, out.bytes);
        self.run_until_idle()?;
        let Some(rb) = self.runtimes.get_mut(b) else { return Ok(false) };
        Ok(rb.take_inbox().iter().any(|(from, p)| from == a && p == payload))
    }

    /// Fires a timeout at `entity` now and runs to idle.
    pub fn fire_timer(&mut self, entity: &EntityId, token: Option<ExchangeId>) -> Result<(), SimError> {
        self.schedule_timer(entity.clone(), token, self.now);
        self.run_until_idle()?;
        Ok(())
    }

    /// Number of exchanges, across all runtimes, where `id` took `role`
    /// and reached Complete.
    pub fn completed_exchanges(&self, id: &EntityId, role: ExchangeRole) -> usize {
        self.runtimes
            .get(id)
            .map_or(0, |r| r.exchanges().filter(|s| s.role == role && s.status == ExchangeStatus::Complete).count())
    }
}
