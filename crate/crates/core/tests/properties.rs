mod common;

use proptest::prelude::*;

use common::strategies::{district_shape, entity_id, message};
use common::{build_district, id};
use hierakey::crypto::{self, KdfLabel, Nonce, SymKey};
use hierakey::hierarchy::{EntityId, HierarchyError};
use hierakey::protocol::ExchangeStatus;
use hierakey::simnet::AdversaryAction;
use hierakey::wire::{self, Body, WireMessage};

fn all_ids(sim: &hierakey::simnet::Simulator) -> Vec<EntityId> {
    sim.topology().entries().map(|e| e.id.clone()).collect()
}

proptest! {
    #[test]
    fn wire_roundtrip(m in message()) {
        let bytes = wire::encode(&m).unwrap();
        prop_assert_eq!(wire::decode(&bytes).unwrap(), m);
    }

    #[test]
    fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..300)) {
        if let Ok(m) = wire::decode(&bytes) {
            prop_assert_eq!(wire::encode(&m).unwrap(), bytes);
        }
    }

    #[test]
    fn mutated_encodings_stay_canonical(m in message(), pos in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let mut bytes = wire::encode(&m).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] = byte;
        if let Ok(back) = wire::decode(&bytes) {
            prop_assert_eq!(wire::encode(&back).unwrap(), bytes);
        }
        let mut short = wire::encode(&m).unwrap();
        short.truncate(i);
        prop_assert!(wire::decode(&short).is_err());
    }

    #[test]
    fn aead_roundtrip_and_bit_flips(
        key in any::<[u8; 32]>(),
        nonce in any::<[u8; 12]>(),
        aad in prop::collection::vec(any::<u8>(), 0..64),
        pt in prop::collection::vec(any::<u8>(), 0..256),
        bit in any::<prop::sample::Index>(),
    ) {
        let p = crypto::default_provider();
        let key = SymKey::from_slice(&key).unwrap();
        let nonce = Nonce(nonce);
        let sealed = p.seal(&key, &nonce, &aad, &pt);
        prop_assert_eq!(sealed.0.len(), pt.len() + crypto::TAG_LEN);
        prop_assert_eq!(p.open(&key, &nonce, &aad, &sealed.0).unwrap(), pt);
        let b = bit.index(sealed.0.len() * 8);
        let mut bad = sealed.0.clone();
        bad[b / 8] ^= 1 << (b % 8);
        prop_assert!(p.open(&key, &nonce, &aad, &bad).is_err());
        let mut bad_aad = aad.clone();
        bad_aad.push(0);
        prop_assert!(p.open(&key, &nonce, &bad_aad, &sealed.0).is_err());
    }

    #[test]
    fn kdf_contexts_do_not_collide(
        ikm in prop::collection::vec(any::<u8>(), 1..48),
        a in prop::collection::vec(any::<u8>(), 0..24),
        b in prop::collection::vec(any::<u8>(), 0..24),
        c in prop::collection::vec(any::<u8>(), 0..24),
    ) {
        let p = crypto::default_provider();
        let k1 = p.kdf(&ikm, KdfLabel::E2e, &[&a, &b]).unwrap();
        let k2 = p.kdf(&ikm, KdfLabel::E2e, &[&a, &b]).unwrap();
        prop_assert_eq!(k1.as_bytes(), k2.as_bytes());
        if a != c {
            let other = p.kdf(&ikm, KdfLabel::E2e, &[&c, &b]).unwrap();
            prop_assert_ne!(k1.as_bytes(), other.as_bytes());
        }
        let mut joined = a.clone();
        joined.extend_from_slice(&b);
        let merged = p.kdf(&ikm, KdfLabel::E2e, &[&joined]).unwrap();
        prop_assert_ne!(k1.as_bytes(), merged.as_bytes());
        let relabelled = p.kdf(&ikm, KdfLabel::Link, &[&a, &b]).unwrap();
        prop_assert_ne!(k1.as_bytes(), relabelled.as_bytes());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn paths_are_symmetric_and_minimal(shape in district_shape(), i in any::<prop::sample::Index>(), j in any::<prop::sample::Index>()) {
        let (sim, _) = build_district(&shape);
        let ids = all_ids(&sim);
        let (a, b) = (&ids[i.index(ids.len())], &ids[j.index(ids.len())]);
        let topo = sim.topology();
        if a == b {
            prop_assert_eq!(topo.resolve_path(a, b).unwrap_err(), HierarchyError::SelfPath);
            return Ok(());
        }
        let ab = topo.resolve_path(a, b).unwrap();
        let ba = topo.resolve_path(b, a).unwrap();
        prop_assert_eq!(ab.reversed().to_string(), ba.to_string());
        prop_assert_eq!(ab.initiator(), a);
        prop_assert_eq!(ab.responder(), b);
        prop_assert!((1..=5).contains(&ab.links()));
        let mut seen = ab.mediators().to_vec();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), ab.mediators().len());
        prop_assert!(topo.validate_path(&ab).is_ok());
    }

    #[test]
    fn revoked_entities_leave_every_path(shape in district_shape(), r in any::<prop::sample::Index>()) {
        let (mut sim, _) = build_district(&shape);
        let ids = all_ids(&sim);
        let victim = ids[r.index(ids.len())].clone();
        if victim == id("DM") {
            return Ok(());
        }
        sim.revoke(&victim).unwrap();
        let topo = sim.topology();
        for a in &ids {
            for b in &ids {
                if a == b {
                    continue;
                }
                match topo.resolve_path(a, b) {
                    Ok(p) => prop_assert!(p.position(&victim).is_none(), "{} contains {}", p, victim),
                    Err(HierarchyError::RevokedEntity(_) | HierarchyError::NoCommonMediator(..)) => {}
                    Err(e) => prop_assert!(false, "{a} -> {b}: {e}"),
                }
            }
        }
    }

    #[test]
    fn unregistered_senders_never_complete(
        shape in district_shape(),
        target in any::<prop::sample::Index>(),
        from in entity_id(),
        forged in prop::collection::vec(any::<u8>(), 16..200),
        seq in 1u64..4,
    ) {
        let (mut sim, houses) = build_district(&shape);
        let (ch, nodes) = &houses[0].clusters[0];
        prop_assert!(sim.establish(&nodes[0], &nodes[1]).is_complete());
        prop_assert!(sim.establish(&nodes[0], ch).is_complete());
        let ids = all_ids(&sim);
        prop_assume!(!ids.contains(&from));
        let complete = |s: &hierakey::simnet::Simulator| {
            s.runtimes().flat_map(|r| r.exchanges()).filter(|x| x.status == ExchangeStatus::Complete).count()
        };
        let before = complete(&sim);
        let to = ids[target.index(ids.len())].clone();
        let mut script = Vec::new();
        for body in [
            Body::Relay { ciphertext: forged.clone() },
            Body::E2eConfirm { ciphertext: forged.clone() },
            Body::Data { ciphertext: forged.clone() },
            Body::Hello { nonce_c: Nonce([9; 12]) },
        ] {
            let seq = if matches!(body, Body::Relay { .. } | Body::Data { .. }) { seq } else { 0 };
            let bytes = wire::encode(&WireMessage::new(from.clone(), to.clone(), seq, body)).unwrap();
            script.push(AdversaryAction::Inject { from_claim: from.clone(), to: to.clone(), bytes, at: sim.now() });
        }
        sim.attach_adversary(script);
        sim.run_until_idle().unwrap();
        prop_assert_eq!(complete(&sim), before);
        let rt = sim.runtime(&to).unwrap();
        prop_assert!(rt.session(&from).is_none());
        prop_assert!(rt.link(&from).is_none());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_pairs_agree_on_keys(shape in district_shape(), i in any::<prop::sample::Index>(), j in any::<prop::sample::Index>()) {
        let (mut sim, _) = build_district(&shape);
        let ids: Vec<EntityId> = all_ids(&sim);
        let (a, b) = (ids[i.index(ids.len())].clone(), ids[j.index(ids.len())].clone());
        prop_assume!(a != b);
        let o = sim.establish(&a, &b);
        prop_assert!(o.is_complete(), "{a} -> {b}: {:?}", o.error_name);
        prop_assert!(o.keys_match);
        let l = o.links().unwrap();
        prop_assert_eq!(o.exchange_msgs, 2 * l + 1);
        prop_assert_eq!(o.aead_ops(&a), 3);
        prop_assert_eq!(o.aead_ops(&b), 3);
        prop_assert_eq!(o.mediator_aead_total(), 4 * (l as u64 - 1));
        let ka = sim.runtime(&a).unwrap().session(&b).unwrap().key().as_bytes();
        let kb = sim.runtime(&b).unwrap().session(&a).unwrap().key().as_bytes();
        prop_assert_eq!(ka, kb);
    }
}
