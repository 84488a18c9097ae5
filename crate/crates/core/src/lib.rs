//! Hierarchical mediator-based authentication and key establishment for
//! IoT overlays.
//!
//! Nodes (N) sit under cluster heads (CH), cluster heads under a house
//! head (H), and heads under a district mediator (DM). Every pair of
//! adjacent overlay entities shares a symmetric key; two arbitrary
//! entities obtain an end-to-end key by relaying seeds hop by hop through
//! their common mediators, then talk directly.

pub mod cli;
pub mod crypto;
pub mod hierarchy;
pub mod protocol;
pub mod simnet;
pub mod wire;
