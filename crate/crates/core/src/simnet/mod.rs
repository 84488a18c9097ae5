//! Deterministic discrete-event network for the overlay and the
//! communication plane.
//!
//! Every message produced by an [`EntityRuntime`] is scheduled for
//! delivery `latency` ticks later and recorded byte for byte in the
//! transcript. Events run in `(time, seqno)` order, so a seed and a script
//! fully determine the transcript. Links are reliable and FIFO; the only
//! losses are the adversary's.

mod adversary;
mod orchestrate;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::crypto::{self, CryptoProvider, DetRng};
use crate::hierarchy::{ta_setup, EntityId, HierarchyError, NetworkParams, Topology};
use crate::protocol::{EntityMetrics, EntityRuntime, Outgoing, ProtocolError};
use crate::wire::ExchangeId;

pub use adversary::{AdversaryAction, Matcher};
pub use orchestrate::{EstablishOutcome, EstablishStatus};

use adversary::{flip_bit, Filter, FilterKind};

pub type SimTime = u64;

pub const DEFAULT_LABEL: &[u8] = b"hierakey-sim";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("event queue is empty")]
    QueueEmpty,
    #[error("bad adversary script: {0}")]
    BadScript(String),
    #[error("no runtime for {0}")]
    NoRuntime(EntityId),
    #[error("link {0} - {1} could not be established: {2}")]
    LinkFailed(EntityId, EntityId, String),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

impl SimError {
    /// Wire error code this failure corresponds to, if any.
    pub fn code(&self) -> Option<u16> {
        match self {
            SimError::Protocol(p) => p.code().map(|c| c as u16),
            SimError::Hierarchy(h) => ProtocolError::Hierarchy(h.clone()).code().map(|c| c as u16),
            _ => None,
        }
    }

    /// Short variant name, e.g. `DuplicateRegistration` or `NoSession`.
    pub fn name(&self) -> String {
        match self {
            SimError::Protocol(p) => p.name(),
            SimError::Hierarchy(h) => crate::protocol::hierarchy_error_name(h).to_owned(),
            SimError::QueueEmpty => "QueueEmpty".into(),
            SimError::BadScript(_) => "BadScript".into(),
            SimError::NoRuntime(_) => "NoRuntime".into(),
            SimError::LinkFailed(..) => "LinkFailed".into(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Disposition {
    Delivered,
    Dropped,
    Tampered,
    Injected,
}

impl Disposition {
    pub fn as_str(self) -> &'static str {
        match self {
            Disposition::Delivered => "Delivered",
            Disposition::Dropped => "Dropped",
            Disposition::Tampered => "Tampered",
            Disposition::Injected => "Injected",
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TranscriptRecord {
    pub time: SimTime,
    pub from: EntityId,
    pub to: EntityId,
    pub bytes: Vec<u8>,
    pub disposition: Disposition,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum EventKind {
    Deliver { from: EntityId, to: EntityId, bytes: Vec<u8>, disposition: Disposition },
    TimerFire { entity: EntityId, token: Option<ExchangeId> },
    AdversaryAct(AdversaryAction),
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SimEvent {
    pub at: SimTime,
    pub seqno: u64,
    pub kind: EventKind,
}

pub struct Simulator {
    now: SimTime,
    latency: SimTime,
    next_seqno: u64,
    queue: BTreeMap<(SimTime, u64), EventKind>,
    topology: Topology,
    provider: Arc<dyn CryptoProvider>,
    seed: u64,
    registrar_rng: DetRng,
    runtimes: BTreeMap<EntityId, EntityRuntime>,
    transcript: Vec<TranscriptRecord>,
    filters: Vec<Filter>,
    eavesdropped: Vec<TranscriptRecord>,
}

impl Simulator {
    /// Simulator over a fresh topology with the default suite.
    pub fn new(rng_seed: u64, latency: SimTime) -> Self {
        let params = ta_setup(crypto::DEFAULT_SUITE, DEFAULT_LABEL).expect("default suite is known");
        Self::with_params(params, rng_seed, latency)
    }

    pub fn with_params(params: NetworkParams, rng_seed: u64, latency: SimTime) -> Self {
        let provider = crypto::provider_for_suite(&params.suite_id).unwrap_or_else(crypto::default_provider);
        Self {
            now: 0,
            latency,
            next_seqno: 0,
            queue: BTreeMap::new(),
            topology: Topology::new(params),
            provider,
            seed: rng_seed,
            registrar_rng: DetRng::derive(rng_seed, "registrar"),
            runtimes: BTreeMap::new(),
            transcript: Vec::new(),
            filters: Vec::new(),
            eavesdropped: Vec::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn latency(&self) -> SimTime {
        self.latency
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn provider(&self) -> &Arc<dyn CryptoProvider> {
        &self.provider
    }

    pub fn runtime(&self, id: &EntityId) -> Option<&EntityRuntime> {
        self.runtimes.get(id)
    }

    pub fn runtime_mut(&mut self, id: &EntityId) -> Option<&mut EntityRuntime> {
        self.runtimes.get_mut(id)
    }

    pub fn runtimes(&self) -> impl Iterator<Item = &EntityRuntime> {
        self.runtimes.values()
    }

    pub fn transcript(&self) -> &[TranscriptRecord] {
        &self.transcript
    }

    /// Copies of every message an Eavesdrop action matched.
    pub fn eavesdropped(&self) -> &[TranscriptRecord] {
        &self.eavesdropped
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn snapshot_metrics(&self) -> BTreeMap<EntityId, EntityMetrics> {
        self.runtimes.iter().map(|(id, rt)| (id.clone(), rt.metrics())).collect()
    }

    /// `time<TAB>disposition<TAB>from<TAB>to<TAB>hex` per record.
    pub fn transcript_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.transcript {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.time,
                r.disposition.as_str(),
                r.from,
                r.to,
                hex::encode(&r.bytes)
            );
        }
        out
    }

    fn schedule(&mut self, at: SimTime, kind: EventKind) {
        self.queue.insert((at, self.next_seqno), kind);
        self.next_seqno += 1;
    }

    /// Puts `bytes` on the wire from `from` to `to`, subject to the
    /// armed adversary filters.
    pub fn send(&mut self, from: &EntityId, to: &EntityId, bytes: Vec<u8>) {
        let mut bytes = bytes;
        let mut disposition = Disposition::Delivered;
        for f in &mut self.filters {
            if !f.fire(from, to, &bytes) {
                continue;
            }
            match f.kind {
                FilterKind::Drop => {
                    self.transcript.push(TranscriptRecord {
                        time: self.now,
                        from: from.clone(),
                        to: to.clone(),
                        bytes,
                        disposition: Disposition::Dropped,
                    });
                    return;
                }
                FilterKind::Tamper(bit) => {
                    flip_bit(&mut bytes, bit);
                    disposition = Disposition::Tampered;
                }
                FilterKind::Eavesdrop => self.eavesdropped.push(TranscriptRecord {
                    time: self.now,
                    from: from.clone(),
                    to: to.clone(),
                    bytes: bytes.clone(),
                    disposition,
                }),
            }
        }
        let at = self.now + self.latency;
        self.schedule(at, EventKind::Deliver { from: from.clone(), to: to.clone(), bytes, disposition });
    }

    fn dispatch(&mut self, from: &EntityId, out: Vec<Outgoing>) {
        for o in out {
            self.send(from, &o.to, o.bytes);
        }
    }

    /// Arms on-path actions and schedules timed ones.
    pub fn attach_adversary(&mut self, script: Vec<AdversaryAction>) {
        for action in script {
            match action {
                AdversaryAction::Drop(m) => self.filters.push(Filter::new(m, FilterKind::Drop)),
                AdversaryAction::Tamper { matcher, bit } => {
                    self.filters.push(Filter::new(matcher, FilterKind::Tamper(bit)))
                }
                AdversaryAction::Eavesdrop(m) => self.filters.push(Filter::new(m, FilterKind::Eavesdrop)),
                AdversaryAction::Replay { at, .. } | AdversaryAction::Inject { at, .. } => {
                    let at = at.max(self.now);
                    self.schedule(at, EventKind::AdversaryAct(action));
                }
            }
        }
    }

    /// Disarms every on-path action.
    pub fn clear_adversary(&mut self) {
        self.filters.clear();
    }

    pub fn schedule_timer(&mut self, entity: EntityId, token: Option<ExchangeId>, at: SimTime) {
        let at = at.max(self.now);
        self.schedule(at, EventKind::TimerFire { entity, token });
    }

    /// Processes the earliest event.
    pub fn step(&mut self) -> Result<SimEvent, SimError> {
        let ((at, seqno), kind) = self.queue.pop_first().ok_or(SimError::QueueEmpty)?;
        self.now = at;
        match &kind {
            EventKind::Deliver { from, to, bytes, disposition } => self.deliver(from, to, bytes, *disposition),
            EventKind::TimerFire { entity, token } => {
                if let Some(rt) = self.runtimes.get_mut(entity) {
                    rt.set_clock(at);
                    rt.expire(token.as_ref());
                }
            }
            EventKind::AdversaryAct(AdversaryAction::Replay { index, .. }) => {
                let rec = self.transcript.get(*index).cloned().ok_or_else(|| {
                    SimError::BadScript(format!("replay of record {index} of {}", self.transcript.len()))
                })?;
                self.deliver(&rec.from, &rec.to, &rec.bytes, Disposition::Injected);
            }
            EventKind::AdversaryAct(AdversaryAction::Inject { from_claim, to, bytes, .. }) => {
                self.deliver(from_claim, to, bytes, Disposition::Injected);
            }
            EventKind::AdversaryAct(other) => {
                return Err(SimError::BadScript(format!("{other:?} cannot be scheduled")));
            }
        }
        Ok(SimEvent { at, seqno, kind })
    }

    fn deliver(&mut self, from: &EntityId, to: &EntityId, bytes: &[u8], disposition: Disposition) {
        let known = self.runtimes.contains_key(to);
        self.transcript.push(TranscriptRecord {
            time: self.now,
            from: from.clone(),
            to: to.clone(),
            bytes: bytes.to_vec(),
            disposition: if known || disposition == Disposition::Injected { disposition } else { Disposition::Dropped },
        });
        let Some(rt) = self.runtimes.get_mut(to) else { return };
        rt.set_clock(self.now);
        let out = rt.handle(bytes, &self.topology);
        self.dispatch(to, out);
    }

    /// Runs until the queue is empty and returns the final time.
    pub fn run_until_idle(&mut self) -> Result<SimTime, SimError> {
        while !self.queue.is_empty() {
            self.step()?;
        }
        Ok(self.now)
    }
}

impl std::fmt::Debug for Simulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulator")
            .field("now", &self.now)
            .field("seed", &self.seed)
            .field("entities", &self.runtimes.len())
            .field("transcript", &self.transcript.len())
            .finish_non_exhaustive()
    }
}
