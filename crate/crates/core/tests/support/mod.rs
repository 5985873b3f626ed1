//! Checks shared by the unit-level test targets and the acceptance run.
#![allow(dead_code)]

pub mod fidelity;
pub mod metrics;
pub mod oracles;
pub mod semantics;
