//! Simulation harness: transports, per-round metrics, the analytic cost
//! model, and experiment presets that exercise the protocol at desk scale.

pub mod config;
pub mod cost;
pub mod experiment;
pub mod metrics;
pub mod transport;
