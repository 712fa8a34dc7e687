//! Local training interface. The round engine is agnostic to what
//! produces an update matrix; a real gradient trainer plugs in here. The
//! bundled [`SyntheticTrainer`] emits deterministic seeded perturbations
//! so end-to-end equality tests against plaintext oracles are exact.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::federation::ClientDataset;
use crate::model::Submodel;
use crate::wire::HyperParams;
use crate::Index;

pub trait LocalTrainer {
    /// Produces the update of the succinct submodel: one row per
    /// `submodel.index_list` entry, in the same order. `counts[i]` is the
    /// number of samples involving that row; rows with a zero count must
    /// come back zero.
    fn train(
        &self,
        submodel: &Submodel,
        data: &ClientDataset,
        counts: &[u64],
        hyper: &HyperParams,
        seed: &[u8; 32],
    ) -> Vec<f64>;
}

/// Deterministic stand-in for gradient descent: each touched row gets a
/// seeded noise direction scaled by a bounded, monotone function of its
/// sample count and the hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticTrainer {
    /// Updates stay within [-bound, bound].
    pub bound: f64,
}

impl SyntheticTrainer {
    pub fn new(bound: f64) -> Self {
        assert!(bound > 0.0);
        Self { bound }
    }

    /// Bound sized to fit the quantizer's clip range.
    pub fn for_quant(cfg: &crate::quant::QuantConfig) -> Self {
        let bound = if cfg.w_min < 0.0 && cfg.w_max > 0.0 {
            cfg.w_min.abs().min(cfg.w_max)
        } else {
            (cfg.w_max - cfg.w_min) / 4.0
        };
        Self::new(bound)
    }

    fn scale(&self, count: u64, hyper: &HyperParams) -> f64 {
        if count == 0 {
            return 0.0;
        }
        let drive = hyper.learning_rate * hyper.epochs as f64 * count as f64
            / hyper.batch_size.max(1) as f64;
        self.bound * (1.0 - (-drive).exp())
    }
}

fn row_rng(seed: &[u8; 32], index: Index) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"sfsl-train-row");
    h.update(seed);
    h.update(index.to_le_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

impl LocalTrainer for SyntheticTrainer {
    fn train(
        &self,
        submodel: &Submodel,
        _data: &ClientDataset,
        counts: &[u64],
        hyper: &HyperParams,
        seed: &[u8; 32],
    ) -> Vec<f64> {
        debug_assert_eq!(counts.len(), submodel.index_list.len());
        let cols = submodel.cols as usize;
        let mut out = vec![0.0; submodel.index_list.len() * cols];
        for (pos, (&j, &count)) in submodel.index_list.iter().zip(counts).enumerate() {
            let scale = self.scale(count, hyper);
            if scale == 0.0 {
                continue;
            }
            let mut rng = row_rng(seed, j);
            for v in &mut out[pos * cols..(pos + 1) * cols] {
                *v = scale * rng.random_range(-1.0..=1.0);
            }
        }
        out
    }
}
