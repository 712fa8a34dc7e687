//! Experiment execution: synthesizes client populations, drives rounds
//! over the chosen transport, injects dropouts, and writes per-round CSV
//! metrics plus a JSON summary.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::federation::engine::{run_round, ClientRound, DropStage, EngineError};
use crate::federation::{ClientDataset, ClientState, TrainingExample};
use crate::harness::config::{
    BloomMode, ConfigError, ExperimentKind, ExperimentSpec, RoundSettings,
};
use crate::harness::cost::{predict_cost, CostModelInput, CostScheme, Role};
use crate::harness::metrics::{self, linear_fit, RoundMetrics, StageId};
use crate::harness::transport::with_links;
use crate::model::GlobalModel;
use crate::psu::{BloomParams, PartitionScheme};
use crate::quant::QuantConfig;
use crate::rng::{derive_rng, derive_seed};
use crate::secure_agg::group::ModpGroup;
use crate::secure_agg::SessionParams;
use crate::wire::{HyperParams, RoundConfigMsg, Scheme};
use crate::{ClientId, Index};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("engine: {0}")]
    Engine(#[from] EngineError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Picks the clients silenced this round: `floor(ratio * n)` of them,
/// seeded-uniformly, all at the given stage.
pub fn inject_dropout(
    ratio: f64,
    stage: DropStage,
    roster: &[ClientId],
    seed: u64,
) -> BTreeMap<ClientId, DropStage> {
    assert!((0.0..=1.0).contains(&ratio));
    let k = (ratio * roster.len() as f64).floor() as usize;
    let mut rng = derive_rng(seed, "dropout", 0);
    let mut ids: Vec<ClientId> = roster.to_vec();
    ids.shuffle(&mut rng);
    ids.truncate(k);
    ids.into_iter().map(|c| (c, stage)).collect()
}

/// Synthesizes one client's dataset: a pool of distinct indices, then
/// samples cycling targets through the pool with random histories.
pub fn synth_dataset(
    rng: &mut impl Rng,
    index_domain: u32,
    set_size: u32,
    samples: u32,
    max_history: u32,
) -> ClientDataset {
    let set_size = set_size.min(index_domain).max(1);
    let mut pool: Vec<Index> = Vec::with_capacity(set_size as usize);
    let mut seen = std::collections::BTreeSet::new();
    while pool.len() < set_size as usize {
        let j = rng.random_range(1..=index_domain);
        if seen.insert(j) {
            pool.push(j);
        }
    }
    let samples = (0..samples)
        .map(|i| {
            let target = pool[i as usize % pool.len()];
            let hist_len = rng.random_range(1..=max_history.max(1));
            let history = (0..hist_len)
                .map(|_| pool[rng.random_range(0..pool.len())])
                .collect();
            TrainingExample { target, history }
        })
        .collect();
    ClientDataset { samples }
}

/// Builds the registered population for an experiment.
pub fn synth_population(spec: &ExperimentSpec, n_override: Option<u32>) -> Vec<ClientState> {
    let r = &spec.round;
    let population = n_override.unwrap_or(spec.data.population);
    let data_limit = r.domain - r.reserved_tail;
    (1..=population)
        .map(|i| {
            let mut rng = derive_rng(r.seed, "dataset", i as u64);
            let dataset = synth_dataset(
                &mut rng,
                data_limit,
                spec.data.set_size,
                spec.data.samples,
                spec.data.history,
            );
            ClientState::new(ClientId(i), dataset)
        })
        .collect()
}

/// Uniform selection without replacement.
pub fn select_clients(population: &[ClientId], n: usize, seed: u64, round: u64) -> Vec<ClientId> {
    let mut rng = derive_rng(seed, "select", round);
    let mut ids = population.to_vec();
    ids.shuffle(&mut rng);
    ids.truncate(n);
    ids.sort_unstable();
    ids
}

/// Concretizes one round's wire config from experiment settings.
/// `capacity_hint` is the expected union cardinality used to size the
/// filter when the config does not pin one (normally `n` times the
/// expected per-client set size).
pub fn build_round_config(
    r: &RoundSettings,
    roster: Vec<ClientId>,
    round_id: u64,
    capacity_hint: u32,
) -> Result<RoundConfigMsg, ConfigError> {
    let n = roster.len() as u32;
    let threshold = if r.threshold == 0 {
        SessionParams::default_threshold(roster.len())
    } else {
        r.threshold
    };
    let capacity = if r.bloom.capacity == 0 {
        capacity_hint.max(1)
    } else {
        r.bloom.capacity
    };
    let bloom_seed = u64::from_le_bytes(
        derive_seed(r.seed, "bloom", round_id)[..8]
            .try_into()
            .unwrap(),
    );
    let bloom = match r.bloom.mode {
        BloomMode::Identity => BloomParams::identity(r.domain),
        BloomMode::Sized => BloomParams::sized(capacity, r.bloom.fpr, bloom_seed)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?,
        BloomMode::Auto => BloomParams::sized_or_identity(capacity, r.bloom.fpr, r.domain, bloom_seed)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?,
    };
    let partitions = if r.partitions.count == 0 {
        PartitionScheme::default_for_domain(r.domain)
    } else {
        PartitionScheme::equal_width(r.domain, r.partitions.count)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?
    };
    let quant = QuantConfig::new(r.quant.levels, r.quant.w_min, r.quant.w_max)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    quant
        .check_lane_capacity(n as u64, r.max_count as u64, 1u64 << r.modulus_bits)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(RoundConfigMsg {
        round_id,
        period_id: r.period_id,
        scheme: r.scheme,
        roster,
        threshold,
        modulus: 1u64 << r.modulus_bits,
        max_count: r.max_count,
        domain: r.domain,
        cols: r.cols,
        bloom,
        partition_starts: partitions.starts().to_vec(),
        quant,
        cpp: [r.cpp.p1, r.cpp.p2, r.cpp.p3, r.cpp.p4],
        draw_range: r.draw_range.into(),
        level_mode: r.level_mode,
        hyper: HyperParams {
            batch_size: r.hyper.batch_size,
            epochs: r.hyper.epochs,
            learning_rate: r.hyper.learning_rate,
        },
        reserved_tail: r.reserved_tail,
        filter_session: round_id * 4 + 1,
        indicator_session: round_id * 4 + 2,
        update_session: round_id * 4 + 3,
    })
}

#[derive(Debug, Serialize)]
pub struct RoundSummaryRow {
    pub round_id: u64,
    pub scheme: Scheme,
    pub n: usize,
    pub union_size: usize,
    pub mean_client_bytes: f64,
    pub mean_client_psu_bytes: f64,
    pub dropouts: usize,
    pub clips: u64,
    pub aborted: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct PsuPoint {
    pub n: u32,
    pub mean_client_psu_bytes: f64,
    pub predicted_terms: f64,
}

#[derive(Debug, Serialize)]
pub struct FitSummary {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

#[derive(Debug, Serialize)]
pub struct CompareSummary {
    pub sfsl_client_bytes: f64,
    pub sfl_client_bytes: f64,
    pub ratio: f64,
}

#[derive(Debug, Serialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub kind: ExperimentKind,
    pub rounds: Vec<RoundSummaryRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psu_points: Option<Vec<PsuPoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psu_fit: Option<FitSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareSummary>,
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
}

struct Csv {
    file: std::fs::File,
}

impl Csv {
    fn create(path: &Path) -> Result<Self, ExperimentError> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{}", metrics::CSV_HEADER)?;
        Ok(Self { file })
    }

    fn append(&mut self, m: &RoundMetrics) -> Result<(), ExperimentError> {
        metrics::write_csv_rows(&mut self.file, m)?;
        Ok(())
    }
}

fn summarize_round(m: &RoundMetrics, n: usize) -> RoundSummaryRow {
    RoundSummaryRow {
        round_id: m.round_id,
        scheme: m.scheme.unwrap_or(Scheme::Sfsl),
        n,
        union_size: m.union_size,
        mean_client_bytes: m.mean_client_bytes(),
        mean_client_psu_bytes: m.mean_client_stage_bytes(StageId::Psu),
        dropouts: m.dropouts.len(),
        clips: m.clip_count,
        aborted: m.aborted.clone(),
    }
}

/// Runs one round over the configured transport and hands back updated
/// client states. Aborted rounds leave the model untouched and yield the
/// abort reason.
#[allow(clippy::type_complexity)]
pub fn run_one_round(
    model: &mut GlobalModel,
    group: &ModpGroup,
    cfg: &RoundConfigMsg,
    r: &RoundSettings,
    states: Vec<ClientState>,
    fates: &BTreeMap<ClientId, DropStage>,
) -> (Result<RoundMetrics, EngineError>, Vec<ClientState>) {
    let clients: Vec<ClientRound> = states
        .into_iter()
        .map(|s| {
            let fate = fates.get(&s.id).copied();
            ClientRound::new(s, group.clone(), r.seed, cfg.round_id).with_fate(fate)
        })
        .collect();
    let (result, rounds_back) = with_links(r.transport, clients, |links| {
        run_round(model, group, cfg, links)
    });
    let states = rounds_back.into_iter().map(ClientRound::into_state).collect();
    match result {
        Ok(outcome) => (Ok(outcome.metrics), states),
        Err(e) => (Err(e), states),
    }
}

fn run_rounds(
    spec: &ExperimentSpec,
    csv: &mut Csv,
    scheme_override: Option<Scheme>,
) -> Result<(Vec<RoundSummaryRow>, Vec<RoundMetrics>), ExperimentError> {
    let mut r = spec.round.clone();
    if let Some(s) = scheme_override {
        r.scheme = s;
    }
    let group = ModpGroup::from_id(r.group.into());
    let mut model = GlobalModel::random(
        r.domain,
        r.cols,
        0.1,
        &mut derive_rng(r.seed, "model-init", 0),
    );
    let mut population = synth_population(spec, None);
    let ids: Vec<ClientId> = population.iter().map(|s| s.id).collect();

    let mut rows = Vec::new();
    let mut all_metrics = Vec::new();
    for round in 0..r.rounds {
        let round_id = round as u64 + 1;
        let roster = select_clients(&ids, r.n as usize, r.seed, round_id);
        let cfg = build_round_config(
            &r,
            roster.clone(),
            round_id,
            r.n.saturating_mul(spec.data.set_size),
        )?;
        let fates = inject_dropout(
            r.dropout_ratio,
            r.dropout_stage,
            &roster,
            derive_seed_u64(r.seed, round_id),
        );

        // Pull the selected clients out, run, put them back.
        let mut selected = Vec::new();
        let mut rest = Vec::new();
        for s in population {
            if roster.contains(&s.id) {
                selected.push(s);
            } else {
                rest.push(s);
            }
        }
        let (result, mut returned) =
            run_one_round(&mut model, &group, &cfg, &r, selected, &fates);
        rest.append(&mut returned);
        population = rest;

        let metrics = match result {
            Ok(m) => m,
            Err(EngineError::Aborted { stage, live, need }) => {
                let mut m = RoundMetrics::new(round_id, cfg.scheme, roster.len());
                m.aborted = Some(format!(
                    "aborted at {}: {live} live, threshold {need}",
                    stage.name()
                ));
                m
            }
            Err(e) => return Err(e.into()),
        };
        csv.append(&metrics)?;
        rows.push(summarize_round(&metrics, roster.len()));
        all_metrics.push(metrics);
    }
    Ok((rows, all_metrics))
}

fn derive_seed_u64(seed: u64, idx: u64) -> u64 {
    u64::from_le_bytes(derive_seed(seed, "dropout-seed", idx)[..8].try_into().unwrap())
}

/// Executes an experiment spec, writing `<name>.metrics.csv` and
/// `<name>.summary.json` under `out_dir`.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out_dir: &Path,
) -> Result<ExperimentSummary, ExperimentError> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(format!("{}.metrics.csv", spec.name));
    let summary_path = out_dir.join(format!("{}.summary.json", spec.name));
    let mut csv = Csv::create(&csv_path)?;

    let mut summary = ExperimentSummary {
        name: spec.name.clone(),
        kind: spec.kind,
        rounds: Vec::new(),
        psu_points: None,
        psu_fit: None,
        compare: None,
        csv_path: csv_path.clone(),
        summary_path: summary_path.clone(),
    };

    match spec.kind {
        ExperimentKind::Rounds => {
            let (rows, _) = run_rounds(spec, &mut csv, None)?;
            summary.rounds = rows;
        }
        ExperimentKind::PsuBench => {
            let mut points = Vec::new();
            let b = &spec.bench;
            let mut n = b.n_start;
            while n <= b.n_end {
                let mut sub = spec.clone();
                sub.round.n = n;
                sub.round.rounds = b.trials;
                sub.data.population = n;
                sub.round.threshold = 0;
                let (rows, ms) = run_rounds(&sub, &mut csv, None)?;
                summary.rounds.extend(rows);
                let mean = ms
                    .iter()
                    .map(|m| m.mean_client_stage_bytes(StageId::Psu))
                    .sum::<f64>()
                    / ms.len() as f64;
                let predicted = predict_cost(&CostModelInput {
                    n: n as f64,
                    s: spec.data.set_size as f64,
                    m: spec.round.domain as f64,
                    d: spec.round.cols as f64,
                    p5: 1.0,
                    p6: 1.0,
                    role: Role::Client,
                    scheme: CostScheme::Psu,
                })
                .comm_terms;
                points.push(PsuPoint {
                    n,
                    mean_client_psu_bytes: mean,
                    predicted_terms: predicted,
                });
                n += b.n_step;
            }
            let fit_points: Vec<(f64, f64)> = points
                .iter()
                .map(|p| (p.n as f64, p.mean_client_psu_bytes))
                .collect();
            if fit_points.len() >= 2 {
                let (intercept, slope, r_squared) = linear_fit(&fit_points);
                summary.psu_fit = Some(FitSummary {
                    intercept,
                    slope,
                    r_squared,
                });
            }
            summary.psu_points = Some(points);
        }
        ExperimentKind::SfslVsSfl => {
            let (rows_sfsl, ms_sfsl) = run_rounds(spec, &mut csv, Some(Scheme::Sfsl))?;
            let (rows_sfl, ms_sfl) = run_rounds(spec, &mut csv, Some(Scheme::Sfl))?;
            summary.rounds.extend(rows_sfsl);
            summary.rounds.extend(rows_sfl);
            let mean = |ms: &[RoundMetrics]| {
                ms.iter().map(RoundMetrics::mean_client_bytes).sum::<f64>() / ms.len() as f64
            };
            let sfsl = mean(&ms_sfsl);
            let sfl = mean(&ms_sfl);
            summary.compare = Some(CompareSummary {
                sfsl_client_bytes: sfsl,
                sfl_client_bytes: sfl,
                ratio: sfsl / sfl,
            });
        }
    }

    let json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&summary_path, json)?;
    log::info!(
        "experiment {} done: metrics at {}, summary at {}",
        spec.name,
        csv_path.display(),
        summary_path.display()
    );
    Ok(summary)
}
