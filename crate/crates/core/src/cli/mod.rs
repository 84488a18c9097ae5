//! Scenario language, runner and the commands behind the `hierakey` binary.

mod parse;
mod run;

use std::fmt::Write as _;
use std::path::Path;

use crate::crypto;
use crate::hierarchy::{read_keystore, KeystoreError, Status};

pub use parse::{
    parse_scenario, Attack, Directive, Expectation, FailSpec, Line, MetricScope, Scenario, ScenarioError, WireMatch,
};
pub use run::{run, EntityRow, ExchangeReport, ExpectResult, RunError, RunReport, ScenarioRun, DEFAULT_LATENCY};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_EXPECT_FAILED: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Scenarios shipped with the binary and run by `hierakey demo`.
pub const BUNDLED: &[(&str, &str)] = &[
    ("inhome_same_cluster", include_str!("../../scenarios/inhome_same_cluster.scn")),
    ("inhome_cross_cluster", include_str!("../../scenarios/inhome_cross_cluster.scn")),
    ("ch_to_ch", include_str!("../../scenarios/ch_to_ch.scn")),
    ("cross_house_cold", include_str!("../../scenarios/cross_house_cold.scn")),
    ("car_mobility", include_str!("../../scenarios/car_mobility.scn")),
    ("revoked_node", include_str!("../../scenarios/revoked_node.scn")),
    ("revoked_head", include_str!("../../scenarios/revoked_head.scn")),
    ("attack_replay", include_str!("../../scenarios/attack_replay.scn")),
    ("attack_tamper", include_str!("../../scenarios/attack_tamper.scn")),
    ("attack_inject", include_str!("../../scenarios/attack_inject.scn")),
    ("attack_drop_confirm", include_str!("../../scenarios/attack_drop_confirm.scn")),
    ("duplicate_registration", include_str!("../../scenarios/duplicate_registration.scn")),
    ("role_violation", include_str!("../../scenarios/role_violation.scn")),
];

/// Output of a command: what to print and the process exit code.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CommandOutput {
    pub stdout: String,
    pub stderr: String,
    pub code: i32,
}

impl CommandOutput {
    fn fail(code: i32, msg: impl Into<String>) -> Self {
        Self { stdout: String::new(), stderr: msg.into(), code }
    }
}

/// `hierakey run <file>`.
pub fn run_file(path: &Path, seed: u64, out_dir: Option<&Path>) -> CommandOutput {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return CommandOutput::fail(EXIT_IO, format!("{}: {e}\n", path.display())),
    };
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario");
    let scenario = match parse_scenario(name, &text) {
        Ok(s) => s,
        Err(e) => return CommandOutput::fail(EXIT_PARSE, format!("{}:{}: {e}\n", path.display(), e.line())),
    };
    let mut r = run(&scenario, seed);
    if let Some(dir) = out_dir {
        if let Err(e) = r.write(dir) {
            return CommandOutput::fail(EXIT_IO, format!("{e}\n"));
        }
    }
    let code = if r.report.passed { EXIT_PASS } else { EXIT_EXPECT_FAILED };
    CommandOutput { stdout: r.report.render(), stderr: String::new(), code }
}

/// Runs every bundled scenario. Artifacts go to `out_dir`.
pub fn demo(seed: u64, out_dir: &Path) -> CommandOutput {
    let mut out = String::new();
    let mut failed = Vec::new();
    for (name, text) in BUNDLED {
        let scenario = parse_scenario(name, text).expect("bundled scenarios parse");
        let mut r = run(&scenario, seed);
        if let Err(e) = r.write(out_dir) {
            return CommandOutput::fail(EXIT_IO, format!("{e}\n"));
        }
        out.push_str(&r.report.render());
        out.push('\n');
        if !r.report.passed {
            failed.push(*name);
        }
    }
    let _ = writeln!(out, "{} scenarios, {} failed", BUNDLED.len(), failed.len());
    for name in &failed {
        let _ = writeln!(out, "  failed: {name}");
    }
    let code = if failed.is_empty() { EXIT_PASS } else { EXIT_EXPECT_FAILED };
    CommandOutput { stdout: out, stderr: String::new(), code }
}

/// `hierakey keystore show <file>`. Key material is never printed.
pub fn keystore_show(path: &Path) -> CommandOutput {
    let provider = crypto::default_provider();
    let contents = match read_keystore(path, provider.as_ref()) {
        Ok(c) => c,
        Err(KeystoreError::Io(e)) => return CommandOutput::fail(EXIT_IO, format!("{}: {e}\n", path.display())),
        Err(e) => return CommandOutput::fail(EXIT_PARSE, format!("{}: {e}\n", path.display())),
    };
    let mut out = String::new();
    let _ = writeln!(out, "{} entities, {} peer keys", contents.entries.len(), contents.peer_keys.len());
    for e in &contents.entries {
        let status = match e.status {
            Status::Active => "active",
            Status::Revoked => "revoked",
        };
        let key = if e.master_key.is_some() { "present" } else { "none" };
        let registrar = e.registrar.as_ref().map_or("-", |r| r.as_str());
        let chs: Vec<&str> = e.associated_chs.iter().map(|c| c.as_str()).collect();
        let _ = writeln!(
            out,
            "  {:<10} {:<3} {:<8} registrar={registrar} key={key} chs=[{}]",
            e.id.as_str(),
            e.role.short(),
            status,
            chs.join(",")
        );
    }
    for (a, b, _) in &contents.peer_keys {
        let _ = writeln!(out, "  peer {a} <-> {b}");
    }
    CommandOutput { stdout: out, stderr: String::new(), code: EXIT_PASS }
}
