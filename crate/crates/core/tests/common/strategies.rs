use proptest::prelude::*;

use hierakey::crypto::Nonce;
use hierakey::hierarchy::EntityId;
use hierakey::wire::{Body, MsgType, WireMessage};

pub fn entity_id() -> impl Strategy<Value = EntityId> {
    "[A-Za-z0-9_.-]{1,64}".prop_map(|s| EntityId::new(s).unwrap())
}

pub fn body() -> impl Strategy<Value = Body> {
    let ct_type = prop_oneof![
        Just(MsgType::LinkChallenge),
        Just(MsgType::LinkFinish),
        Just(MsgType::Relay),
        Just(MsgType::E2eConfirm),
        Just(MsgType::Data),
    ];
    prop_oneof![
        any::<[u8; 12]>().prop_map(|n| Body::Hello { nonce_c: Nonce(n) }),
        (ct_type, prop::collection::vec(any::<u8>(), 16..=1024))
            .prop_map(|(t, ct)| Body::with_ciphertext(t, ct).unwrap()),
        (any::<u16>(), "\\PC{0,120}").prop_map(|(code, detail)| Body::Error { code, detail }),
    ]
}

pub fn message() -> impl Strategy<Value = WireMessage> {
    (entity_id(), entity_id(), any::<u64>(), body()).prop_map(|(from, to, seq, body)| {
        let seq = if matches!(body.msg_type(), MsgType::Hello | MsgType::E2eConfirm) { 0 } else { seq };
        WireMessage::new(from, to, seq, body)
    })
}

/// Shape of a generated district: houses, clusters per house, nodes per cluster.
#[derive(Clone, Debug)]
pub struct DistrictShape {
    pub seed: u64,
    pub houses: Vec<Vec<usize>>,
}

pub fn district_shape() -> impl Strategy<Value = DistrictShape> {
    (any::<u64>(), prop::collection::vec(prop::collection::vec(2usize..=3, 2..=4), 2..=3))
        .prop_map(|(seed, houses)| DistrictShape { seed, houses })
}
