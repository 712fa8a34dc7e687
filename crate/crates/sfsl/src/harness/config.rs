//! Experiment configuration: TOML files whose keys mirror the round
//! config, plus built-in presets.

use serde::{Deserialize, Serialize};

use crate::harness::transport::TransportMode;
use crate::psu::DrawRange;
use crate::secure_agg::group::GroupId;
use crate::wire::{LevelMode, Scheme};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// A sequence of full rounds under one scheme.
    Rounds,
    /// Set-union cost sweep over a range of roster sizes.
    PsuBench,
    /// One submodel round against one full-model round, same data.
    SfslVsSfl,
}

fn default_one() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub name: String,
    pub round: RoundSettings,
    pub data: DataSettings,
    #[serde(default)]
    pub bench: BenchSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundSettings {
    pub scheme: Scheme,
    /// Clients selected per round.
    pub n: u32,
    /// 0 means the two-thirds default.
    pub threshold: u32,
    pub rounds: u32,
    /// Full index domain size m.
    pub domain: u32,
    /// Parameter columns d.
    pub cols: u32,
    pub modulus_bits: u32,
    pub max_count: u32,
    pub reserved_tail: u32,
    pub level_mode: LevelMode,
    pub draw_range: DrawRangeSetting,
    pub group: GroupSetting,
    pub transport: TransportMode,
    pub seed: u64,
    pub period_id: u64,
    pub dropout_ratio: f64,
    pub dropout_stage: crate::federation::engine::DropStage,
    pub cpp: CppSettings,
    pub bloom: BloomSettings,
    pub partitions: PartitionSettings,
    pub quant: QuantSettings,
    pub hyper: HyperSettings,
}

impl Default for RoundSettings {
    fn default() -> Self {
        Self {
            scheme: Scheme::Sfsl,
            n: 4,
            threshold: 0,
            rounds: 1,
            domain: 500,
            cols: 4,
            modulus_bits: 32,
            max_count: 512,
            reserved_tail: 0,
            level_mode: LevelMode::Stochastic,
            draw_range: DrawRangeSetting::Full,
            group: GroupSetting::Small,
            transport: TransportMode::InProcess,
            seed: 42,
            period_id: 1,
            dropout_ratio: 0.0,
            dropout_stage: crate::federation::engine::DropStage::AfterUpdateShares,
            cpp: CppSettings::default(),
            bloom: BloomSettings::default(),
            partitions: PartitionSettings::default(),
            quant: QuantSettings::default(),
            hyper: HyperSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrawRangeSetting {
    Full,
    Positive,
}

impl From<DrawRangeSetting> for DrawRange {
    fn from(s: DrawRangeSetting) -> Self {
        match s {
            DrawRangeSetting::Full => DrawRange::FullRange,
            DrawRangeSetting::Positive => DrawRange::PositiveOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupSetting {
    /// 257-bit safe-prime group; desk-scale experiments only.
    Small,
    Modp2048,
}

impl From<GroupSetting> for GroupId {
    fn from(s: GroupSetting) -> Self {
        match s {
            GroupSetting::Small => GroupId::InsecureSmall,
            GroupSetting::Modp2048 => GroupId::Modp2048,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CppSettings {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
}

impl Default for CppSettings {
    fn default() -> Self {
        Self {
            p1: 1.0,
            p2: 1.0,
            p3: 1.0,
            p4: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BloomMode {
    /// One lane per domain index, identity hash.
    Identity,
    /// Sized from capacity and target rate.
    Sized,
    /// Sized, falling back to identity when at least as long as the
    /// domain.
    Auto,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BloomSettings {
    pub mode: BloomMode,
    /// 0 derives the capacity as n * expected set size.
    pub capacity: u32,
    pub fpr: f64,
}

impl Default for BloomSettings {
    fn default() -> Self {
        Self {
            mode: BloomMode::Auto,
            capacity: 0,
            fpr: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSettings {
    /// 0 means one partition per 4096 indices.
    pub count: u32,
}

impl Default for PartitionSettings {
    fn default() -> Self {
        Self { count: 0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSettings {
    pub levels: u32,
    pub w_min: f64,
    pub w_max: f64,
}

impl Default for QuantSettings {
    fn default() -> Self {
        Self {
            levels: 1 << 15,
            w_min: -1.0,
            w_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperSettings {
    pub batch_size: u32,
    pub epochs: u32,
    pub learning_rate: f64,
}

impl Default for HyperSettings {
    fn default() -> Self {
        Self {
            batch_size: 2,
            epochs: 1,
            learning_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    /// Registered client population to select from.
    pub population: u32,
    /// Target real index set cardinality per client.
    pub set_size: u32,
    /// Samples per client.
    pub samples: u32,
    /// Maximum history length per sample.
    pub history: u32,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            population: 8,
            set_size: 40,
            samples: 40,
            history: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub n_start: u32,
    pub n_end: u32,
    pub n_step: u32,
    #[serde(default = "default_one")]
    pub trials: u32,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            n_start: 20,
            n_end: 100,
            n_step: 20,
            trials: 1,
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let spec: ExperimentSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.round;
        if r.n < 2 {
            return Err(ConfigError::Invalid("need at least 2 clients".into()));
        }
        if r.threshold > r.n {
            return Err(ConfigError::Invalid("threshold exceeds n".into()));
        }
        if self.data.population < r.n && self.kind != ExperimentKind::PsuBench {
            return Err(ConfigError::Invalid(
                "population smaller than clients per round".into(),
            ));
        }
        if !(2..=32).contains(&r.modulus_bits) {
            return Err(ConfigError::Invalid("modulus_bits outside [2,32]".into()));
        }
        if r.domain < 1 || r.cols < 1 {
            return Err(ConfigError::Invalid("empty model".into()));
        }
        if r.reserved_tail >= r.domain {
            return Err(ConfigError::Invalid("reserved tail swallows domain".into()));
        }
        if !(0.0..=1.0).contains(&r.dropout_ratio) {
            return Err(ConfigError::Invalid("dropout ratio outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Built-in experiment presets.
pub const PRESETS: &[(&str, &str)] = &[
    ("smoke", include_str!("../../presets/smoke.toml")),
    ("psu-bench", include_str!("../../presets/psu-bench.toml")),
    ("sfsl-vs-sfl", include_str!("../../presets/sfsl-vs-sfl.toml")),
];

pub fn load_preset(name: &str) -> Result<ExperimentSpec, ConfigError> {
    for (n, text) in PRESETS {
        if *n == name {
            return ExperimentSpec::from_toml(text);
        }
    }
    Err(ConfigError::Invalid(format!(
        "unknown preset {name:?}; available: {}",
        PRESETS
            .iter()
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join(", ")
    )))
}
