//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

mod common;

use std::collections::HashSet;
use std::time::{Duration, Instant};

use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use common::strategies::{district_shape, message};
use common::{build_district, district, house, id};
use hierakey::cli;
use hierakey::crypto::{self, DetRng, RandomSource, SymKey};
use hierakey::hierarchy::{HierarchyError, Role, Topology};
use hierakey::protocol::ExchangeStatus;
use hierakey::simnet::{AdversaryAction, Disposition, EstablishOutcome, Matcher, SimError, Simulator};
use hierakey::wire::{self, Body, MsgType, WireMessage};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn runner(seed: u8) -> TestRunner {
    TestRunner::new_with_rng(Config::default(), TestRng::from_seed(RngAlgorithm::ChaCha, &[seed; 32]))
}

fn msg_type(bytes: &[u8]) -> Option<MsgType> {
    wire::peek_header(bytes).ok().map(|h| h.msg_type)
}

fn error_codes(sim: &Simulator, since: usize) -> Vec<u16> {
    sim.transcript()[since..]
        .iter()
        .filter_map(|r| match wire::decode(&r.bytes).ok()?.body {
            Body::Error { code, .. } => Some(code),
            _ => None,
        })
        .collect()
}

fn completions(sim: &Simulator) -> usize {
    sim.runtimes().flat_map(|r| r.exchanges()).filter(|s| s.status == ExchangeStatus::Complete).count()
}

fn session_key(sim: &Simulator, a: &str, b: &str) -> Option<[u8; 32]> {
    sim.runtime(&id(a))?.session(&id(b)).map(|s| *s.key().as_bytes())
}

fn ch_to_ch() -> Check {
    let started = Instant::now();
    let mut sim = house(11);
    sim.seal_installation();
    let cold = sim.establish(&id("CH1"), &id("CH2"));
    ensure(cold.is_complete(), "cold exchange failed")?;
    let warm = sim.establish(&id("CH1"), &id("CH2"));
    let elapsed = started.elapsed();
    ensure(warm.is_complete() && warm.keys_match, "warm exchange failed")?;
    ensure(warm.exchange_msgs == 5 && warm.total_msgs() == 5, format!("{} msgs", warm.total_msgs()))?;
    let path = warm.path.as_ref().unwrap().to_string();
    ensure(path == "CH1 -> H1 -> CH2", path)?;
    let last = sim.transcript().iter().rev().find(|r| r.disposition != Disposition::Injected).unwrap();
    ensure(
        last.from == id("CH1") && last.to == id("CH2") && msg_type(&last.bytes) == Some(MsgType::E2eConfirm),
        format!("last message was {} -> {}", last.from, last.to),
    )?;
    ensure(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("5 msgs, CONFIRM CH1 -> CH2 direct, {} ms", elapsed.as_millis()))
}

fn cross_house() -> Check {
    let started = Instant::now();
    let mut sim = district(12);
    sim.seal_installation();
    let before = sim.transcript().len();
    let cold = sim.establish(&id("N1"), &id("N4"));
    ensure(cold.is_complete() && cold.keys_match, "cold exchange failed")?;
    ensure(cold.links() == Some(5), format!("{:?} links", cold.links()))?;
    ensure(
        cold.head_link_msgs == 5 && cold.exchange_msgs == 11 && cold.total_msgs() == 16,
        format!("cold {} + {}", cold.head_link_msgs, cold.exchange_msgs),
    )?;
    let seg = &sim.transcript()[before..];
    let via_dm = seg
        .iter()
        .filter(|r| msg_type(&r.bytes) == Some(MsgType::Relay) && (r.from == id("DM1") || r.to == id("DM1")))
        .count();
    ensure(via_dm == 4, format!("{via_dm} relays touched DM1"))?;
    let head_confirms = seg
        .iter()
        .filter(|r| msg_type(&r.bytes) == Some(MsgType::E2eConfirm) && r.from == id("H1") && r.to == id("H2"))
        .count();
    ensure(head_confirms == 1, "head link not confirmed H1 -> H2")?;
    ensure(sim.topology().lookup_peer_key(&id("H2"), &id("H1")).is_ok(), "head link key not recorded")?;
    let warm = sim.establish(&id("N1"), &id("N4"));
    ensure(warm.is_complete() && warm.keys_match, "warm exchange failed")?;
    ensure(warm.total_msgs() == 11 && warm.head_link_msgs == 0, format!("warm {}", warm.total_msgs()))?;
    ensure(warm.aead_ops(&id("DM1")) == 0, "DM1 involved in warm exchange")?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("cold 5 + 11 = 16 via DM1, warm 11 over 5 links, {} ms", elapsed.as_millis()))
}

fn pick(rng: &mut DetRng, n: usize) -> usize {
    let mut b = [0u8; 8];
    rng.fill(&mut b);
    (u64::from_be_bytes(b) % n as u64) as usize
}

fn message_formula() -> Check {
    let mut runner = runner(3);
    let shapes = district_shape();
    let mut checked = [0usize; 6];
    for t in 0..50 {
        let shape = shapes.new_tree(&mut runner).unwrap().current();
        let (mut sim, houses) = build_district(&shape);
        let mut rng = DetRng::new(shape.seed);
        let h = &houses[pick(&mut rng, houses.len())];
        let n = h.clusters.len();
        let ci = pick(&mut rng, n);
        let (ch, nodes) = &h.clusters[ci];
        let (ch2, nodes2) = &h.clusters[(ci + 1 + pick(&mut rng, n - 1)) % n];
        let other = &houses[(houses.iter().position(|x| x.head == h.head).unwrap() + 1) % houses.len()];
        let (_, far_nodes) = &other.clusters[pick(&mut rng, other.clusters.len())];
        let pairs = [
            (nodes[0].clone(), nodes[1].clone(), 2),
            (ch.clone(), ch2.clone(), 2),
            (nodes[pick(&mut rng, nodes.len())].clone(), nodes2[pick(&mut rng, nodes2.len())].clone(), 4),
            (nodes[0].clone(), far_nodes[pick(&mut rng, far_nodes.len())].clone(), 5),
        ];
        for (a, b, l) in pairs {
            let o = sim.establish(&a, &b);
            ensure(o.is_complete(), format!("topology {t}: {a} -> {b} failed: {:?}", o.error_name))?;
            ensure(o.links() == Some(l), format!("topology {t}: {a} -> {b} has {:?} links", o.links()))?;
            ensure(o.exchange_msgs == 2 * l + 1, format!("topology {t}: {a} -> {b} took {}", o.exchange_msgs))?;
            checked[l] += 1;
        }
    }
    Ok(format!("L=2: {}, L=4: {}, L=5: {} exchanges over 50 topologies", checked[2], checked[4], checked[5]))
}

fn aead_load() -> Check {
    let mut sim = district(14);
    sim.seal_installation();
    let mut seen = Vec::new();
    for (a, b, l) in [("N1", "N2", 2), ("N1", "CH2", 3), ("N1", "N3", 4), ("N1", "N4", 5), ("N1", "N4", 5)] {
        let o: EstablishOutcome = sim.establish(&id(a), &id(b));
        ensure(o.is_complete(), format!("{a} -> {b} failed"))?;
        ensure(o.links() == Some(l), format!("{a} -> {b}: {:?} links", o.links()))?;
        let (ia, ra) = (o.aead_ops(&id(a)), o.aead_ops(&id(b)));
        ensure(ia == 3 && ra == 3, format!("{a} -> {b}: end nodes {ia}/{ra}"))?;
        let m = o.mediator_aead_total();
        ensure(m == 2 * (2 * l as u64 - 2), format!("L={l}: mediators {m}"))?;
        let label = format!("L={l}:{m}");
        let label = if seen.contains(&label) { format!("{label} (warm)") } else { label };
        seen.push(label);
    }
    Ok(format!("end nodes 3/3, mediators {}", seen.join(" ")))
}

fn key_freshness() -> Check {
    let mut sim = house(15);
    sim.seal_installation();
    let mut keys = HashSet::new();
    for i in 0..100 {
        let o = sim.establish(&id("N1"), &id("N2"));
        ensure(o.is_complete() && o.keys_match, format!("run {i} failed"))?;
        let ki = session_key(&sim, "N1", "N2").ok_or("initiator has no session")?;
        let kr = session_key(&sim, "N2", "N1").ok_or("responder has no session")?;
        ensure(ki == kr, format!("run {i}: keys differ"))?;
        keys.insert(ki);
    }
    ensure(keys.len() == 100, format!("{} distinct keys", keys.len()))?;
    Ok("100 exchanges, matching keys, 100 distinct".into())
}

fn adversary() -> Check {
    let mut sim = house(16);
    sim.seal_installation();
    ensure(sim.establish(&id("N1"), &id("N2")).is_complete(), "baseline failed")?;
    let done = completions(&sim);

    // Replayed request.
    let index = sim
        .transcript()
        .iter()
        .rposition(|r| r.from == id("N1") && r.to == id("CH1") && msg_type(&r.bytes) == Some(MsgType::Relay))
        .unwrap();
    let mark = sim.transcript().len();
    let at = sim.now();
    sim.attach_adversary(vec![AdversaryAction::Replay { index, at }]);
    sim.run_until_idle().map_err(|e| e.to_string())?;
    ensure(error_codes(&sim, mark) == [3], format!("replay gave {:?}", error_codes(&sim, mark)))?;

    // Tampered relay is dropped by the next hop.
    let mark = sim.transcript().len();
    sim.attach_adversary(vec![AdversaryAction::Tamper {
        matcher: Matcher::any().from(id("N1")).to(id("CH1")).msg_type(MsgType::Relay).once(),
        bit: 8 * 40,
    }]);
    let o = sim.establish(&id("N1"), &id("N2"));
    sim.clear_adversary();
    ensure(!o.is_complete(), "tampered exchange completed")?;
    let forwarded = sim.transcript()[mark..].iter().any(|r| r.from == id("CH1") && r.to == id("N2"));
    ensure(!forwarded, "CH1 forwarded a tampered relay")?;
    ensure(error_codes(&sim, mark).contains(&1), "no AuthFailure for tampering")?;

    // Injection from an unregistered identity.
    let mark = sim.transcript().len();
    let forged = WireMessage::new(id("MALLORY"), id("CH1"), 1, Body::Relay { ciphertext: vec![7; 80] });
    let at = sim.now();
    sim.attach_adversary(vec![AdversaryAction::Inject {
        from_claim: id("MALLORY"),
        to: id("CH1"),
        bytes: wire::encode(&forged).unwrap(),
        at,
    }]);
    sim.run_until_idle().map_err(|e| e.to_string())?;
    let first_hop = sim.transcript()[mark..].iter().find(|r| r.from == id("CH1")).and_then(|r| {
        match wire::decode(&r.bytes).ok()?.body {
            Body::Error { code, .. } => Some(code),
            _ => None,
        }
    });
    ensure(first_hop == Some(1), format!("injection answered with {first_hop:?}"))?;
    ensure(completions(&sim) == done, "an attack produced a completed exchange")?;

    // To and through revoked entities.
    let mut d = district(17);
    d.seal_installation();
    ensure(d.establish(&id("N1"), &id("N4")).is_complete(), "district baseline failed")?;
    d.revoke(&id("N2")).map_err(|e| e.to_string())?;
    let to_revoked = d.establish(&id("N1"), &id("N2"));
    ensure(
        !to_revoked.is_complete() && to_revoked.error_code == Some(2),
        format!("to revoked: {:?}", to_revoked.error_name),
    )?;
    let done = completions(&d);
    d.revoke(&id("H2")).map_err(|e| e.to_string())?;
    let through = d.establish(&id("N1"), &id("N4"));
    ensure(
        !through.is_complete() && through.error_code == Some(2),
        format!("through revoked: {:?}", through.error_name),
    )?;
    ensure(completions(&d) == done, "revoked path completed")?;

    // Duplicate registration after sealing.
    match d.register(&id("H1"), &id("N1"), Role::Node) {
        Err(SimError::Hierarchy(HierarchyError::DuplicateRegistration(_))) => {}
        other => return Err(format!("duplicate registration gave {other:?}")),
    }
    Ok("replay 0x0003, tamper dropped at CH1, injection 0x0001, revoked 0x0002, DuplicateRegistration".into())
}

fn demo_determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ra = cli::demo(2024, a.path());
    let rb = cli::demo(2024, b.path());
    ensure(ra.code == 0 && rb.code == 0, "demo reported failures")?;
    let strip = |s: &str, dir: &std::path::Path| s.replace(dir.to_str().unwrap(), "<out>");
    ensure(strip(&ra.stdout, a.path()) == strip(&rb.stdout, b.path()), "reports differ")?;
    let mut files = 0;
    for (name, _) in cli::BUNDLED {
        let f = format!("{name}.transcript.tsv");
        let x = std::fs::read(a.path().join(&f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join(&f)).map_err(|e| e.to_string())?;
        ensure(x == y, format!("{f} differs"))?;
        files += 1;
    }
    Ok(format!("{files} transcripts byte-identical"))
}

fn codecs() -> Check {
    let mut runner = runner(8);
    let strategy = message();
    for i in 0..10_000 {
        let m = strategy.new_tree(&mut runner).unwrap().current();
        let bytes = wire::encode(&m).map_err(|e| format!("case {i}: {e}"))?;
        let back = wire::decode(&bytes).map_err(|e| format!("case {i}: {e}"))?;
        ensure(back == m, format!("case {i}: decode(encode(m)) != m"))?;
        ensure(wire::encode(&back).unwrap() == bytes, format!("case {i}: encode(decode(b)) != b"))?;
    }

    let p = crypto::default_provider();
    let mut rng = DetRng::new(8);
    for len in [0usize, 1, 63, 64, 65, 1000] {
        let mut k = [0u8; 32];
        rng.fill(&mut k);
        let key = SymKey::from_slice(&k).unwrap();
        let nonce = rng.random_nonce();
        let mut pt = vec![0u8; len];
        rng.fill(&mut pt);
        let sealed = p.seal(&key, &nonce, b"aad", &pt);
        ensure(p.open(&key, &nonce, b"aad", &sealed.0).ok() == Some(pt.clone()), "aead roundtrip")?;
        for bit in 0..sealed.0.len() * 8 {
            let mut bad = sealed.0.clone();
            bad[bit / 8] ^= 0x80 >> (bit % 8);
            ensure(p.open(&key, &nonce, b"aad", &bad).is_err(), format!("flip {bit} of {len}-byte box accepted"))?;
        }
    }

    let mut sim = Simulator::new(8, 1);
    sim.install_root(&id("H1"), Role::Head).unwrap();
    for ch in ["CH1", "CH2", "CH3"] {
        sim.register(&id("H1"), &id(ch), Role::ClusterHead).unwrap();
    }
    for (i, n) in ["N1", "N2", "N3", "N4", "N5", "N6"].iter().enumerate() {
        sim.register(&id("H1"), &id(n), Role::Node).unwrap();
        sim.associate(&id(n), &id(["CH1", "CH2", "CH3"][i % 3])).unwrap();
    }
    sim.revoke(&id("N6")).unwrap();
    let topo = sim.topology();
    ensure(topo.len() == 10, format!("{} entities", topo.len()))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ten.keystore");
    topo.save_keystore(&path).map_err(|e| e.to_string())?;
    let loaded = Topology::load_keystore(&path, topo.params().clone()).map_err(|e| e.to_string())?;
    ensure(loaded.to_keystore() == topo.to_keystore(), "keystore reload differs")?;
    Ok("10000 wire roundtrips both ways, AEAD bit flips rejected, 10-entity keystore reloads".into())
}

fn demo_speed() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let started = Instant::now();
    let r = cli::demo(1, dir.path());
    let elapsed = started.elapsed();
    ensure(r.code == 0, "demo failed")?;
    ensure(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!("{} ms", elapsed.as_millis()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("ch-to-ch via head", ch_to_ch),
        ("cross-house with head link", cross_house),
        ("2L+1 messages on fuzzed topologies", message_formula),
        ("constant end-node AEAD load", aead_load),
        ("fresh keys per exchange", key_freshness),
        ("adversary rejection", adversary),
        ("deterministic demo", demo_determinism),
        ("codec and keystore roundtrips", codecs),
        ("demo under 10 s", demo_speed),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("acceptance {}: PASS {name} ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("acceptance {}: FAIL {name} ({why})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
