//! Round orchestration: datasets and their index sets, succinct filtering,
//! count vectors, the pluggable local trainer, and the server/client round
//! state machines in [`engine`].

pub mod engine;
pub mod trainer;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::{ClientId, Index};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("primary index {0} has no secondary mapping")]
    MappingGap(Index),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad dataset line {line}: {reason}")]
    BadLine { line: usize, reason: String },
}

/// One training sample: a target index plus a history multiset of indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub target: Index,
    pub history: Vec<Index>,
}

/// A client's private dataset. The real index set is everything appearing
/// in any sample.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientDataset {
    pub samples: Vec<TrainingExample>,
}

impl ClientDataset {
    pub fn real_index_set(&self) -> BTreeSet<Index> {
        let mut set = BTreeSet::new();
        for s in &self.samples {
            set.insert(s.target);
            set.extend(&s.history);
        }
        set
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// One sample per line: `target<TAB>comma-separated history`.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), DataError> {
        for s in &self.samples {
            let hist: Vec<String> = s.history.iter().map(u32::to_string).collect();
            writeln!(w, "{}\t{}", s.target, hist.join(","))?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self, DataError> {
        let mut samples = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (target, rest) = line.split_once('\t').ok_or_else(|| DataError::BadLine {
                line: i + 1,
                reason: "missing tab separator".into(),
            })?;
            let target: Index = target.parse().map_err(|_| DataError::BadLine {
                line: i + 1,
                reason: format!("bad target {target:?}"),
            })?;
            let mut history = Vec::new();
            for tok in rest.split(',').filter(|t| !t.is_empty()) {
                history.push(tok.parse().map_err(|_| DataError::BadLine {
                    line: i + 1,
                    reason: format!("bad history index {tok:?}"),
                })?);
            }
            samples.push(TrainingExample { target, history });
        }
        Ok(Self { samples })
    }

    pub fn load_from_path(path: &Path) -> Result<Self, DataError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::load(f)
    }
}

/// Keeps only the samples trainable on the succinct index set: samples
/// whose target is outside it are dropped, history indices outside it are
/// pruned, and samples left with an empty history are dropped.
pub fn build_succinct_training_set(
    data: &ClientDataset,
    succinct: &BTreeSet<Index>,
) -> ClientDataset {
    let samples = data
        .samples
        .iter()
        .filter(|s| succinct.contains(&s.target))
        .filter_map(|s| {
            let history: Vec<Index> = s
                .history
                .iter()
                .copied()
                .filter(|j| succinct.contains(j))
                .collect();
            if history.is_empty() {
                None
            } else {
                Some(TrainingExample {
                    target: s.target,
                    history,
                })
            }
        })
        .collect();
    ClientDataset { samples }
}

/// Number of samples involving each of `indices` (target or history
/// membership; a sample counts once per index).
pub fn count_vector(data: &ClientDataset, indices: &[Index]) -> Vec<u64> {
    let positions: BTreeMap<Index, usize> = indices
        .iter()
        .enumerate()
        .map(|(pos, &j)| (j, pos))
        .collect();
    let mut counts = vec![0u64; indices.len()];
    for s in &data.samples {
        let mut seen = BTreeSet::new();
        seen.insert(s.target);
        seen.extend(&s.history);
        for j in seen {
            if let Some(&pos) = positions.get(&j) {
                counts[pos] += 1;
            }
        }
    }
    counts
}

/// Publicly shared surjective map from primary indices to secondary ids
/// (e.g. item to category).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IndexCorrelationMap {
    map: BTreeMap<Index, u32>,
}

impl IndexCorrelationMap {
    pub fn new(map: BTreeMap<Index, u32>) -> Self {
        Self { map }
    }

    pub fn get(&self, primary: Index) -> Option<u32> {
        self.map.get(&primary).copied()
    }
}

/// Image of a primary index set under the correlation map, deduplicated.
/// Secondary ids are derived from the (already perturbed) primary set and
/// never re-randomized independently, so correlated answers stay
/// consistent.
pub fn derive_secondary_ids(
    primary: &BTreeSet<Index>,
    map: &IndexCorrelationMap,
) -> Result<BTreeSet<u32>, DataError> {
    let mut out = BTreeSet::new();
    for &j in primary {
        out.insert(map.get(j).ok_or(DataError::MappingGap(j))?);
    }
    Ok(out)
}

/// Per-client persistent state carried across rounds.
pub struct ClientState {
    pub id: ClientId,
    pub dataset: ClientDataset,
    pub memo: crate::perturb::Memoization,
    /// Per-client response probabilities; `None` means use the round's.
    pub cpp_override: Option<crate::perturb::ProbabilityParams>,
}

impl ClientState {
    pub fn new(id: ClientId, dataset: ClientDataset) -> Self {
        Self {
            id,
            dataset,
            memo: crate::perturb::Memoization::new(0),
            cpp_override: None,
        }
    }
}
