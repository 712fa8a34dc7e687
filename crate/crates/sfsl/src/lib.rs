//! Protocol engine and desk-scale simulation harness for secure federated
//! submodel learning.
//!
//! Clients of a federation hold private index sets into a shared global
//! model. Each round, they jointly compute a private set union of those
//! sets ([`psu`]), perturb their own sets under local differential privacy
//! ([`perturb`]), and upload count-weighted, stochastically quantized
//! submodel updates ([`quant`]) through dropout-tolerant masked summation
//! ([`secure_agg`]). The server reconstructs unions, aggregates updates,
//! and maintains the global model ([`model`]). [`federation`] wires the
//! per-round state machines together and [`harness`] provides transport,
//! metrics, the analytic cost model, and experiment presets.

pub mod federation;
pub mod harness;
pub mod model;
pub mod perturb;
pub mod psu;
pub mod quant;
pub mod rng;
pub mod secure_agg;
pub mod wire;

/// Identifies one client within a federation. Roster order (ascending id)
/// fixes the sign convention for mutual masks, so ids must be unique.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct ClientId(pub u32);

impl std::fmt::Display for ClientId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// 1-based row index into the global model.
pub type Index = u32;
