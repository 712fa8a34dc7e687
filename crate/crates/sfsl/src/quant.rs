//! Stochastic multi-level quantization of real-valued updates into small
//! integers suitable for modular masked summation, plus the exact
//! compressed-space weighted average used on the server side.
//!
//! A parameter `x` clipped into `[w_min, w_max]` maps to a level
//! `z in {0..levels-1}` by rounding `u = (x - w_min) / unit` down with
//! probability `ceil(u) - u` and up otherwise, so `E[z] = u` and the
//! mapping is unbiased. Averaging weighted levels and dequantizing the
//! quotient telescopes the `w_min` offset away, so with expected levels the
//! recovered weighted mean is exact up to floating rounding.

use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum QuantError {
    #[error("invalid quantizer config: {0}")]
    BadConfig(String),
    #[error("level {level} outside [0, {max}]")]
    LevelOutOfRange { level: f64, max: u32 },
    #[error("total count is zero")]
    ZeroWeight,
    #[error("lane capacity exceeded: {0}")]
    CapacityExceeded(String),
}

/// Quantization grid: `levels` points spaced `unit` apart from `w_min` to
/// `w_max` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantConfig {
    pub levels: u32,
    pub w_min: f64,
    pub w_max: f64,
}

impl QuantConfig {
    pub fn new(levels: u32, w_min: f64, w_max: f64) -> Result<Self, QuantError> {
        if levels < 2 {
            return Err(QuantError::BadConfig(format!(
                "need at least 2 levels, got {levels}"
            )));
        }
        if !(w_min.is_finite() && w_max.is_finite() && w_min < w_max) {
            return Err(QuantError::BadConfig(format!(
                "bad clip bounds [{w_min}, {w_max}]"
            )));
        }
        Ok(Self {
            levels,
            w_min,
            w_max,
        })
    }

    /// Paper-scale default: 2^15 levels over [-1, 1].
    pub fn default_paper() -> Self {
        Self::new(1 << 15, -1.0, 1.0).unwrap()
    }

    pub fn unit(&self) -> f64 {
        (self.w_max - self.w_min) / (self.levels - 1) as f64
    }

    pub fn max_level(&self) -> u32 {
        self.levels - 1
    }

    /// True when `x` needs clipping before quantization.
    pub fn out_of_range(&self, x: f64) -> bool {
        !(self.w_min..=self.w_max).contains(&x)
    }

    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.w_min, self.w_max)
    }

    /// Checks that `clients * max_count * max_level` fits the aggregation
    /// modulus, so summed weighted lanes cannot wrap.
    pub fn check_lane_capacity(
        &self,
        clients: u64,
        max_count: u64,
        modulus: u64,
    ) -> Result<(), QuantError> {
        let need = clients
            .checked_mul(max_count)
            .and_then(|x| x.checked_mul(self.max_level() as u64));
        match need {
            Some(v) if v < modulus => Ok(()),
            _ => Err(QuantError::CapacityExceeded(format!(
                "{clients} clients x count {max_count} x level {} >= modulus {modulus}",
                self.max_level()
            ))),
        }
    }
}

/// Exact (expected-value) level for `x`: the real-valued grid coordinate
/// `(clip(x) - w_min) / unit`.
pub fn expected_level(x: f64, cfg: &QuantConfig) -> f64 {
    (cfg.clip(x) - cfg.w_min) / cfg.unit()
}

/// Stochastic rounding of `x` to a grid level. Values landing exactly on a
/// grid point quantize deterministically.
pub fn quantize(x: f64, cfg: &QuantConfig, rng: &mut impl Rng) -> u32 {
    let u = expected_level(x, cfg);
    let floor = u.floor();
    let frac = u - floor;
    let z = if frac == 0.0 {
        floor
    } else if rng.random::<f64>() < frac {
        floor + 1.0
    } else {
        floor
    };
    (z as u32).min(cfg.max_level())
}

/// Maps an integer level back to its grid value.
pub fn dequantize(z: u32, cfg: &QuantConfig) -> Result<f64, QuantError> {
    if z > cfg.max_level() {
        return Err(QuantError::LevelOutOfRange {
            level: z as f64,
            max: cfg.max_level(),
        });
    }
    Ok(z as f64 * cfg.unit() + cfg.w_min)
}

/// Real-valued dequantization, for averaged levels.
pub fn dequantize_real(z: f64, cfg: &QuantConfig) -> Result<f64, QuantError> {
    if !(0.0..=cfg.max_level() as f64).contains(&z) {
        return Err(QuantError::LevelOutOfRange {
            level: z,
            max: cfg.max_level(),
        });
    }
    Ok(z * cfg.unit() + cfg.w_min)
}

/// Server-side recovery of one lane: divides the summed weighted levels by
/// the total count and dequantizes the quotient.
pub fn averaged_dequantize(
    sum_weighted_levels: u64,
    total_count: u64,
    cfg: &QuantConfig,
) -> Result<f64, QuantError> {
    if total_count == 0 {
        return Err(QuantError::ZeroWeight);
    }
    dequantize_real(sum_weighted_levels as f64 / total_count as f64, cfg)
}

/// Same recovery for real-valued (expected-level) sums.
pub fn averaged_dequantize_real(
    sum_weighted_levels: f64,
    total_count: u64,
    cfg: &QuantConfig,
) -> Result<f64, QuantError> {
    if total_count == 0 {
        return Err(QuantError::ZeroWeight);
    }
    dequantize_real(sum_weighted_levels / total_count as f64, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn cfg(levels: u32) -> QuantConfig {
        QuantConfig::new(levels, -1.0, 1.0).unwrap()
    }

    #[test]
    fn grid_endpoints_are_deterministic() {
        let c = cfg(3);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(quantize(c.w_min, &c, &mut rng), 0);
            assert_eq!(quantize(c.w_max, &c, &mut rng), c.max_level());
        }
    }

    #[test]
    fn midpoint_has_expected_mean() {
        // bounds [-1,1], 3 levels, x = 0.5 -> u = 1.5 -> z in {1,2}, mean 1.5
        let c = cfg(3);
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let n = 1_000_000u64;
        let mut sum = 0u64;
        for _ in 0..n {
            let z = quantize(0.5, &c, &mut rng);
            assert!(z == 1 || z == 2);
            sum += z as u64;
        }
        let mean = sum as f64 / n as f64;
        assert!((mean - 1.5).abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn dequantize_endpoints() {
        let c = cfg(5);
        assert_eq!(dequantize(0, &c).unwrap(), c.w_min);
        assert_eq!(dequantize(c.max_level(), &c).unwrap(), c.w_max);
        assert!(matches!(
            dequantize(5, &c),
            Err(QuantError::LevelOutOfRange { .. })
        ));
    }

    #[test]
    fn paper_default_midscale_value() {
        // 2^15 levels on [-1,1]: level 16384 sits just above zero.
        let c = QuantConfig::default_paper();
        let v = dequantize(16384, &c).unwrap();
        let want = 16384.0 * 2.0 / 32767.0 - 1.0;
        assert_eq!(v, want);
        assert!((v - 3.0518e-5).abs() < 1e-8, "got {v}");
    }

    #[test]
    fn averaged_identity_is_exact() {
        // dw = 0.2 with weight 1 and dw = -0.4 with weight 3 average to
        // -0.25 exactly when exact levels are used, for any level count.
        for levels in [2u32, 7, 256, 1 << 15] {
            let c = cfg(levels);
            let u1 = expected_level(0.2, &c);
            let u2 = expected_level(-0.4, &c);
            let sum = 1.0 * u1 + 3.0 * u2;
            let got = averaged_dequantize_real(sum, 4, &c).unwrap();
            assert!(
                (got - (-0.25)).abs() <= 8.0 * f64::EPSILON,
                "levels {levels}: got {got}"
            );
        }
    }

    #[test]
    fn single_party_exact_roundtrip() {
        let c = cfg(1 << 15);
        let dw = 0.123456789;
        let u = expected_level(dw, &c);
        let got = averaged_dequantize_real(3.0 * u, 3, &c).unwrap();
        assert!((got - dw).abs() <= 4.0 * f64::EPSILON * dw.abs().max(1.0));
    }

    #[test]
    fn zero_weight_is_an_error() {
        let c = cfg(4);
        assert!(matches!(
            averaged_dequantize(7, 0, &c),
            Err(QuantError::ZeroWeight)
        ));
    }

    #[test]
    fn lane_capacity_check() {
        let c = QuantConfig::default_paper();
        // n <= 128 clients, counts <= 2^9, 2^15 levels fit a 2^32 modulus.
        c.check_lane_capacity(128, 1 << 9, 1 << 32).unwrap();
        assert!(c.check_lane_capacity(1 << 10, 1 << 9, 1 << 32).is_err());
    }

    #[test]
    fn unbiased_over_random_inputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let c = cfg(17);
        for _ in 0..20 {
            let x = rng.random_range(-1.0..1.0);
            let n = 200_000u64;
            let mut acc = 0.0;
            for _ in 0..n {
                acc += dequantize(quantize(x, &c, &mut rng), &c).unwrap();
            }
            let mean = acc / n as f64;
            // Bernoulli variance bound: unit/2 per draw.
            let se = c.unit() / 2.0 / (n as f64).sqrt();
            assert!(
                (mean - x).abs() < 4.0 * se + 1e-12,
                "x={x} mean={mean} se={se}"
            );
        }
    }
}
