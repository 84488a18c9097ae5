use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::crypto::Nonce;
use crate::hierarchy::{EntityId, Role};
use crate::protocol::{EntityMetrics, ExchangeStatus};
use crate::simnet::{AdversaryAction, Disposition, EstablishOutcome, Matcher, SimError, Simulator};
use crate::wire::{self, Body, MsgType, WireMessage};

use super::parse::{Attack, Directive, Expectation, Line, MetricScope, Scenario, WireMatch};

pub const DEFAULT_LATENCY: u64 = 1;

#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct ExpectResult {
    pub line: usize,
    pub directive: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct ExchangeReport {
    pub line: usize,
    pub initiator: EntityId,
    pub responder: EntityId,
    pub path: Option<String>,
    pub links: Option<usize>,
    pub status: String,
    pub error: Option<String>,
    pub exchange_msgs: usize,
    pub head_link_msgs: usize,
    pub handshake_msgs: usize,
    pub initiator_aead: u64,
    pub responder_aead: u64,
    pub mediator_aead: u64,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct EntityRow {
    pub id: EntityId,
    pub role: String,
    pub aead: u64,
    pub kdf: u64,
    pub msgs_sent: u64,
    pub msgs_received: u64,
    pub bytes_sent: u64,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub passed: bool,
    pub expects: Vec<ExpectResult>,
    pub exchanges: Vec<ExchangeReport>,
    pub entities: Vec<EntityRow>,
    /// Every completed exchange cost each end node the same AEAD work.
    pub end_node_constant_load: bool,
    pub transcript_records: usize,
    pub transcript_path: Option<String>,
}

impl RunReport {
    pub fn failures(&self) -> impl Iterator<Item = &ExpectResult> {
        self.expects.iter().filter(|e| !e.passed)
    }

    /// Human-readable summary: expectations, exchanges, per-entity table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "scenario {} (seed {}): {verdict}", self.scenario, self.seed);
        for e in &self.expects {
            let mark = if e.passed { "ok  " } else { "FAIL" };
            let _ = writeln!(out, "  {mark} line {:>3}  {}  [{}]", e.line, e.directive, e.detail);
        }
        if !self.exchanges.is_empty() {
            let _ = writeln!(out, "  exchanges:");
            for x in &self.exchanges {
                let _ = writeln!(
                    out,
                    "    line {:>3}  {} -> {}  {}  msgs={} head_link={} handshakes={}  path={}",
                    x.line,
                    x.initiator,
                    x.responder,
                    x.error.as_deref().unwrap_or(&x.status),
                    x.exchange_msgs,
                    x.head_link_msgs,
                    x.handshake_msgs,
                    x.path.as_deref().unwrap_or("-"),
                );
            }
        }
        if !self.entities.is_empty() {
            let _ = writeln!(
                out,
                "  {:<10} {:<4} {:>6} {:>5} {:>6} {:>6} {:>8}",
                "entity", "role", "aead", "kdf", "sent", "recv", "bytes"
            );
            for r in &self.entities {
                let _ = writeln!(
                    out,
                    "  {:<10} {:<4} {:>6} {:>5} {:>6} {:>6} {:>8}",
                    r.id.as_str(),
                    r.role,
                    r.aead,
                    r.kdf,
                    r.msgs_sent,
                    r.msgs_received,
                    r.bytes_sent
                );
            }
        }
        let _ = writeln!(out, "  end_node_constant_load: {}", self.end_node_constant_load);
        if let Some(p) = &self.transcript_path {
            let _ = writeln!(out, "  transcript: {p} ({} records)", self.transcript_records);
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

struct Runner {
    sim: Simulator,
    expects: Vec<ExpectResult>,
    exchanges: Vec<ExchangeReport>,
    last: Option<EstablishOutcome>,
    /// Transcript index where the latest active directive started.
    mark: usize,
}

fn error_code(bytes: &[u8]) -> Option<u16> {
    match wire::decode(bytes).ok()?.body {
        Body::Error { code, .. } => Some(code),
        _ => None,
    }
}

fn matcher(m: &WireMatch) -> Matcher {
    let mut out = Matcher::any().msg_type(m.msg_type);
    out.from = m.from.clone();
    out.to = m.to.clone();
    out
}

impl Runner {
    fn record(&mut self, line: &Line, passed: bool, detail: impl Into<String>) {
        self.expects.push(ExpectResult {
            line: line.number,
            directive: line.text.clone(),
            passed,
            detail: detail.into(),
        });
    }

    fn check(&mut self, line: &Line, expect: &Expectation, result: Result<String, (Option<u16>, String)>) {
        match (expect, result) {
            (Expectation::Success, Ok(d)) => self.record(line, true, d),
            (Expectation::Success, Err((_, name))) => self.record(line, false, format!("failed: {name}")),
            (Expectation::Failure(spec), Ok(_)) => self.record(line, false, format!("expected {spec}, succeeded")),
            (Expectation::Failure(spec), Err((code, name))) => {
                let ok = spec.accepts(code, Some(&name));
                let got = match code {
                    Some(c) => format!("{name} (0x{c:04x})"),
                    None => name,
                };
                self.record(
                    line,
                    ok,
                    if ok { format!("failed as expected: {got}") } else { format!("expected {spec}, got {got}") },
                );
            }
        }
    }

    fn sim_result(r: Result<(), SimError>, ok: &str) -> Result<String, (Option<u16>, String)> {
        r.map(|_| ok.to_owned()).map_err(|e| (e.code(), e.name()))
    }

    fn completes(&self) -> usize {
        self.sim.runtimes().flat_map(|r| r.exchanges()).filter(|s| s.status == ExchangeStatus::Complete).count()
    }

    fn codes_since(&self, start: usize) -> Vec<u16> {
        self.sim.transcript()[start..].iter().filter_map(|r| error_code(&r.bytes)).collect()
    }

    fn entity(&mut self, line: &Line, id: &EntityId, role: Role, parent: Option<&EntityId>, expect: &Expectation) {
        let r = match parent {
            Some(p) => self.sim.register(p, id, role),
            None => self.sim.install_root(id, role),
        };
        self.check(line, expect, Self::sim_result(r, "registered"));
    }

    fn establish(&mut self, line: &Line, a: &EntityId, b: &EntityId, expect_msgs: Option<usize>, expect: &Expectation) {
        self.mark = self.sim.transcript().len();
        let o = self.sim.establish(a, b);
        self.exchanges.push(ExchangeReport {
            line: line.number,
            initiator: a.clone(),
            responder: b.clone(),
            path: o.path.as_ref().map(ToString::to_string),
            links: o.links(),
            status: format!("{:?}", o.status),
            error: o.error_name.clone(),
            exchange_msgs: o.exchange_msgs,
            head_link_msgs: o.head_link_msgs,
            handshake_msgs: o.handshake_msgs,
            initiator_aead: o.aead_ops(a),
            responder_aead: o.aead_ops(b),
            mediator_aead: o.mediator_aead_total(),
        });
        let result = if o.is_complete() {
            Ok(format!("{} msgs over {}", o.total_msgs(), o.path.as_ref().map(ToString::to_string).unwrap_or_default()))
        } else {
            Err((o.error_code, o.error_name.clone().unwrap_or_else(|| "Failed".into())))
        };
        match (expect_msgs, &result) {
            (Some(k), Ok(_)) if o.total_msgs() != k => {
                self.record(line, false, format!("expected {k} msgs, saw {}", o.total_msgs()));
            }
            _ => self.check(line, expect, result),
        }
        self.last = Some(o);
    }

    fn traffic(&mut self, line: &Line, a: &EntityId, b: &EntityId, payload: &[u8], expect: &Expectation) {
        self.mark = self.sim.transcript().len();
        let result = match self.sim.send_traffic(a, b, payload) {
            Ok(true) => Ok(format!("{} bytes delivered", payload.len())),
            Ok(false) => {
                let code = self.codes_since(self.mark).first().copied();
                Err((code, "NotDelivered".to_owned()))
            }
            Err(e) => Err((e.code(), e.name())),
        };
        self.check(line, expect, result);
    }

    fn attack(&mut self, line: &Line, attack: &Attack) {
        match attack {
            Attack::Drop { target, count } => {
                self.sim.attach_adversary(vec![AdversaryAction::Drop(matcher(target).times(*count))]);
            }
            Attack::Tamper { target, bit, count } => {
                self.sim.attach_adversary(vec![AdversaryAction::Tamper {
                    matcher: matcher(target).times(*count),
                    bit: *bit,
                }]);
            }
            Attack::Replay { target, expect_code } => {
                let m = matcher(target);
                let found = self
                    .sim
                    .transcript()
                    .iter()
                    .rposition(|r| r.disposition != Disposition::Injected && m.matches(&r.from, &r.to, &r.bytes));
                let Some(index) = found else {
                    self.record(line, false, "nothing to replay");
                    return;
                };
                let at = self.sim.now();
                self.run_attack(line, AdversaryAction::Replay { index, at }, *expect_code);
            }
            Attack::Inject { from, to, msg_type, expect_code } => {
                let body = match msg_type {
                    MsgType::Hello => Body::Hello { nonce_c: Nonce([0xA5; 12]) },
                    MsgType::E2eConfirm => Body::E2eConfirm { ciphertext: vec![0xA5; 44] },
                    _ => Body::Relay { ciphertext: vec![0xA5; 96] },
                };
                let seq = if matches!(msg_type, MsgType::Relay) { 1 } else { 0 };
                let bytes =
                    wire::encode(&WireMessage::new(from.clone(), to.clone(), seq, body)).expect("fixed-size forgery");
                let at = self.sim.now();
                self.run_attack(
                    line,
                    AdversaryAction::Inject { from_claim: from.clone(), to: to.clone(), bytes, at },
                    *expect_code,
                );
            }
        }
    }

    fn run_attack(&mut self, line: &Line, action: AdversaryAction, expect_code: u16) {
        self.mark = self.sim.transcript().len();
        let before = self.completes();
        self.sim.attach_adversary(vec![action]);
        if let Err(e) = self.sim.run_until_idle() {
            self.record(line, false, e.to_string());
            return;
        }
        let codes = self.codes_since(self.mark);
        let new_completes = self.completes() - before;
        let passed = codes.contains(&expect_code) && new_completes == 0;
        let seen: Vec<String> = codes.iter().map(|c| format!("0x{c:04x}")).collect();
        self.record(line, passed, format!("errors [{}], new completions {new_completes}", seen.join(",")));
    }

    fn expect_metric(
        &mut self,
        line: &Line,
        entity: &EntityId,
        aead: Option<u64>,
        kdf: Option<u64>,
        scope: MetricScope,
    ) {
        let m = match scope {
            MetricScope::Total => self.sim.runtime(entity).map(|r| r.metrics()).unwrap_or_default(),
            MetricScope::Last => self.last.as_ref().and_then(|o| o.metrics.get(entity).copied()).unwrap_or_default(),
        };
        let mut passed = true;
        if let Some(n) = aead {
            passed &= m.aead_ops() == n;
        }
        if let Some(n) = kdf {
            passed &= m.kdf_count == n;
        }
        self.record(line, passed, format!("aead={} kdf={}", m.aead_ops(), m.kdf_count));
    }

    fn expect_error(&mut self, line: &Line, code: u16) {
        let codes = self.codes_since(self.mark);
        let seen: Vec<String> = codes.iter().map(|c| format!("0x{c:04x}")).collect();
        self.record(line, codes.contains(&code), format!("errors [{}]", seen.join(",")));
    }

    fn step(&mut self, line: &Line) {
        match &line.directive {
            Directive::Entity { id, role, parent, expect } => self.entity(line, id, *role, parent.as_ref(), expect),
            Directive::Associate { node, ch, expect } => {
                let r = self.sim.associate(node, ch);
                self.check(line, expect, Self::sim_result(r, "associated"));
            }
            Directive::SealInstallation => self.sim.seal_installation(),
            Directive::Establish { a, b, expect_msgs, expect } => self.establish(line, a, b, *expect_msgs, expect),
            Directive::Traffic { a, b, payload, expect } => self.traffic(line, a, b, payload, expect),
            Directive::Revoke { id, expect } => {
                let r = self.sim.revoke(id);
                self.check(line, expect, Self::sim_result(r, "revoked"));
            }
            Directive::Attack(a) => self.attack(line, a),
            Directive::ExpectMetric { entity, aead, kdf, scope } => {
                self.expect_metric(line, entity, *aead, *kdf, *scope)
            }
            Directive::ExpectError { code } => self.expect_error(line, *code),
        }
    }

    fn end_node_constant_load(&self) -> bool {
        let mut seen = self
            .exchanges
            .iter()
            .filter(|x| x.status == "Complete" && x.exchange_msgs > 0)
            .flat_map(|x| [x.initiator_aead, x.responder_aead]);
        match seen.next() {
            Some(first) => seen.all(|v| v == first),
            None => true,
        }
    }

    fn entity_rows(&self) -> Vec<EntityRow> {
        let metrics: BTreeMap<EntityId, EntityMetrics> = self.sim.snapshot_metrics();
        self.sim
            .runtimes()
            .map(|rt| {
                let m = metrics[rt.id()];
                EntityRow {
                    id: rt.id().clone(),
                    role: rt.role().short().to_owned(),
                    aead: m.aead_ops(),
                    kdf: m.kdf_count,
                    msgs_sent: m.msgs_sent,
                    msgs_received: m.msgs_received,
                    bytes_sent: m.bytes_sent,
                }
            })
            .collect()
    }
}

/// A finished run: the report plus the simulator it ran in.
pub struct ScenarioRun {
    pub report: RunReport,
    pub sim: Simulator,
}

impl ScenarioRun {
    /// Writes `<name>.transcript.tsv`, `<name>.report.json` and
    /// `<name>.keystore` into `dir`.
    pub fn write(&mut self, dir: &Path) -> Result<(), RunError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| RunError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let name = &self.report.scenario;
        let tsv = dir.join(format!("{name}.transcript.tsv"));
        std::fs::write(&tsv, self.sim.transcript_tsv()).map_err(io(&tsv))?;
        self.report.transcript_path = Some(tsv.display().to_string());
        let ks = dir.join(format!("{name}.keystore"));
        self.sim.topology().save_keystore(&ks).map_err(|e| match e {
            crate::hierarchy::KeystoreError::Io(source) => RunError::Io { path: ks.clone(), source },
            other => RunError::Io { path: ks.clone(), source: std::io::Error::other(other.to_string()) },
        })?;
        let json = dir.join(format!("{name}.report.json"));
        let body = serde_json::to_string_pretty(&self.report).expect("report serializes");
        std::fs::write(&json, body + "\n").map_err(io(&json))?;
        Ok(())
    }
}

/// Executes every directive in order. Protocol and registry failures
/// become failed expectations; nothing aborts the run.
pub fn run(scenario: &Scenario, seed: u64) -> ScenarioRun {
    let mut r = Runner {
        sim: Simulator::new(seed, DEFAULT_LATENCY),
        expects: Vec::new(),
        exchanges: Vec::new(),
        last: None,
        mark: 0,
    };
    for line in &scenario.lines {
        r.step(line);
    }
    let report = RunReport {
        scenario: scenario.name.clone(),
        seed,
        passed: r.expects.iter().all(|e| e.passed),
        end_node_constant_load: r.end_node_constant_load(),
        entities: r.entity_rows(),
        transcript_records: r.sim.transcript().len(),
        transcript_path: None,
        expects: r.expects,
        exchanges: r.exchanges,
    };
    ScenarioRun { report, sim: r.sim }
}
