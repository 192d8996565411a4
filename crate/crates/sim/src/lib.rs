//! Simulator, scenario harness and metrics for the topoaddr protocol.

pub mod harness;
pub mod simnet;
