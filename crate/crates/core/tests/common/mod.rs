#![allow(dead_code)]

pub mod strategies;

use hierakey::hierarchy::{EntityId, Role};
use hierakey::simnet::Simulator;

pub fn id(s: &str) -> EntityId {
    EntityId::new(s).unwrap()
}

/// Two houses under one district:
///
/// ```text
/// DM1 ─ H1 ─ CH1 (N1, N2), CH2 (N3)
///     └ H2 ─ CH3 (N4), CH4 (N5)
/// ```
pub fn district(seed: u64) -> Simulator {
    let mut sim = Simulator::new(seed, 1);
    sim.install_root(&id("DM1"), Role::DistrictMediator).unwrap();
    for h in ["H1", "H2"] {
        sim.register(&id("DM1"), &id(h), Role::Head).unwrap();
    }
    for (h, ch) in [("H1", "CH1"), ("H1", "CH2"), ("H2", "CH3"), ("H2", "CH4")] {
        sim.register(&id(h), &id(ch), Role::ClusterHead).unwrap();
    }
    for (h, n, ch) in
        [("H1", "N1", "CH1"), ("H1", "N2", "CH1"), ("H1", "N3", "CH2"), ("H2", "N4", "CH3"), ("H2", "N5", "CH4")]
    {
        sim.register(&id(h), &id(n), Role::Node).unwrap();
        sim.associate(&id(n), &id(ch)).unwrap();
    }
    sim
}

/// A single house: `H1 ─ CH1 (N1, N2), CH2 (N3)` with no district.
pub fn house(seed: u64) -> Simulator {
    let mut sim = Simulator::new(seed, 1);
    sim.install_root(&id("H1"), Role::Head).unwrap();
    for ch in ["CH1", "CH2"] {
        sim.register(&id("H1"), &id(ch), Role::ClusterHead).unwrap();
    }
    for (n, ch) in [("N1", "CH1"), ("N2", "CH1"), ("N3", "CH2")] {
        sim.register(&id("H1"), &id(n), Role::Node).unwrap();
        sim.associate(&id(n), &id(ch)).unwrap();
    }
    sim
}

/// One generated house: its head and, per cluster, the head and its nodes.
pub struct GeneratedHouse {
    pub head: EntityId,
    pub clusters: Vec<(EntityId, Vec<EntityId>)>,
}

/// Builds and seals a district from a generated shape.
pub fn build_district(shape: &strategies::DistrictShape) -> (Simulator, Vec<GeneratedHouse>) {
    let mut sim = Simulator::new(shape.seed, 1);
    let dm = id("DM");
    sim.install_root(&dm, Role::DistrictMediator).unwrap();
    let mut houses = Vec::new();
    for (h, clusters) in shape.houses.iter().enumerate() {
        let head = id(&format!("H{h}"));
        sim.register(&dm, &head, Role::Head).unwrap();
        let mut built = Vec::new();
        for (c, &nodes) in clusters.iter().enumerate() {
            let ch = id(&format!("C{h}.{c}"));
            sim.register(&head, &ch, Role::ClusterHead).unwrap();
            let mut ns = Vec::new();
            for n in 0..nodes {
                let node = id(&format!("N{h}.{c}.{n}"));
                sim.register(&head, &node, Role::Node).unwrap();
                sim.associate(&node, &ch).unwrap();
                ns.push(node);
            }
            built.push((ch, ns));
        }
        houses.push(GeneratedHouse { head, clusters: built });
    }
    sim.seal_installation();
    (sim, houses)
}
