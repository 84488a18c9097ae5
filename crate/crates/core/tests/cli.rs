use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hierakey(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hierakey"));
    cmd.args(args).env_remove("HIERAKEY_SEED");
    if let Some(s) = env_seed {
        cmd.env("HIERAKEY_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.scn"))
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_passing_scenario_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = hierakey(&["run", scenario("inhome_cross_cluster").to_str().unwrap(), "--seed", "3", "--out", out], None);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS"));
    for f in ["transcript.tsv", "report.json", "keystore"] {
        assert!(dir.path().join(format!("inhome_cross_cluster.{f}")).is_file());
    }
}

#[test]
fn failed_expectation_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "bad.scn", "entity H1 role=head\nentity CH1 role=ch parent=H1\nentity CH2 role=ch parent=H1\nestablish CH1 CH2 expect_msgs=4\n");
    let o = hierakey(&["run", f.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("expected 4 msgs, saw 5"));
}

#[test]
fn parse_error_exits_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "broken.scn", "entity H1 role=head\n\nteleport H1\n");
    let o = hierakey(&["run", f.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(":3:"), "{err}");
    assert!(err.contains("teleport"));
}

#[test]
fn empty_scenario_passes() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "empty.scn", "# nothing here\n\n");
    let o = hierakey(&["run", f.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("scenario empty (seed 1): PASS"));
    assert!(!stdout(&o).contains("entity "));
}

#[test]
fn missing_file_exits_three() {
    let o = hierakey(&["run", "/nonexistent/scenario.scn"], None);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn unwritable_out_dir_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = write(dir.path(), "file", "x");
    let o = hierakey(
        &["run", scenario("ch_to_ch").to_str().unwrap(), "--out", blocker.join("sub").to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn env_seed_overrides_flag() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let file = scenario("ch_to_ch");
    let file = file.to_str().unwrap();
    let run = |dir: &Path, seed: &str, env: Option<&str>| {
        let o = hierakey(&["run", file, "--seed", seed, "--out", dir.to_str().unwrap()], env);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read(dir.join("ch_to_ch.transcript.tsv")).unwrap()
    };
    let with_env = run(a.path(), "5", Some("9"));
    let flag_nine = run(b.path(), "9", None);
    let flag_five = run(c.path(), "5", None);
    assert_eq!(with_env, flag_nine);
    assert_ne!(with_env, flag_five);
}

#[test]
fn invalid_env_seed_exits_two() {
    let o = hierakey(&["run", scenario("ch_to_ch").to_str().unwrap()], Some("banana"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn demo_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = hierakey(&["demo", "--seed", "42", "--out", a.path().to_str().unwrap()], None);
    let ob = hierakey(&["demo", "--seed", "42", "--out", b.path().to_str().unwrap()], None);
    assert_eq!(oa.status.code(), Some(0), "{}", stdout(&oa));
    assert_eq!(ob.status.code(), Some(0));
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names.iter().filter(|n| n.to_string_lossy().ends_with(".transcript.tsv")) {
        assert_eq!(std::fs::read(a.path().join(n)).unwrap(), std::fs::read(b.path().join(n)).unwrap(), "{n:?}");
    }
}

#[test]
fn keystore_show_lists_entities_without_keys() {
    let dir = tempfile::tempdir().unwrap();
    let o =
        hierakey(&["run", scenario("cross_house_cold").to_str().unwrap(), "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0));
    let ks = dir.path().join("cross_house_cold.keystore");
    let o = hierakey(&["keystore", "show", ks.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("7 entities, 1 peer keys"), "{text}");
    assert!(text.contains("peer H1 <-> H2"));
    assert!(text.contains("N1"));
    assert!(text.contains("chs=[CH1]"));
}

#[test]
fn keystore_show_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "junk.keystore", "not a keystore at all");
    assert_eq!(hierakey(&["keystore", "show", f.to_str().unwrap()], None).status.code(), Some(2));
    let missing = dir.path().join("absent.keystore");
    assert_eq!(hierakey(&["keystore", "show", missing.to_str().unwrap()], None).status.code(), Some(3));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(hierakey(&["frobnicate"], None).status.code(), Some(2));
}
