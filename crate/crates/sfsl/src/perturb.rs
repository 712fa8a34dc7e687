//! Index set perturbation: a permanent randomized response memoized per
//! index, followed by a fresh instantaneous randomized response every
//! round. The permanent stage bounds what longitudinal observation can
//! ever reveal (`eps_infinity`); a single round reveals at most
//! `eps_one`. Also hosts the closed-form privacy quantities: the derived
//! end-to-end probabilities `p5, p6`, the aggregate-inference event
//! probabilities `p7, p8`, and the tuning thresholds on `p5`.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::Index;

const MEMO_MAGIC: &[u8; 8] = b"SFSLMEM\0";
const MEMO_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PerturbError {
    #[error("memoized yes/no sets overlap at index {0}")]
    CorruptMemo(Index),
    #[error("union index {0} reached instantaneous stage unmemoized")]
    MemoGap(Index),
    #[error("probability {name}={value} outside [0,1]")]
    BadProbability { name: &'static str, value: f64 },
    #[error("tuning threshold undefined for n_j1 = 0")]
    TuningUndefined,
    #[error("memo file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad memo file: {0}")]
    BadMemoFile(String),
}

/// The four client-chosen response probabilities plus the derived
/// end-to-end pair. `p1`/`p2` drive the permanent stage for real/non-real
/// indices, `p3`/`p4` the instantaneous stage for memoized yes/no.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProbabilityParams {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
}

impl ProbabilityParams {
    pub fn new(p1: f64, p2: f64, p3: f64, p4: f64) -> Result<Self, PerturbError> {
        for (name, value) in [("p1", p1), ("p2", p2), ("p3", p3), ("p4", p4)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(PerturbError::BadProbability { name, value });
            }
        }
        Ok(Self { p1, p2, p3, p4 })
    }

    /// Probability a real index ends up in the perturbed set:
    /// `p5 = p1 (p3 - p4) + p4`.
    pub fn p5(&self) -> f64 {
        self.p1 * (self.p3 - self.p4) + self.p4
    }

    /// Probability a non-real index ends up in the perturbed set:
    /// `p6 = p2 (p3 - p4) + p4`.
    pub fn p6(&self) -> f64 {
        self.p2 * (self.p3 - self.p4) + self.p4
    }

    pub fn derived_probs(&self) -> (f64, f64) {
        (self.p5(), self.p6())
    }

    /// Longitudinal privacy level of the permanent stage.
    pub fn epsilon_infinity(&self) -> f64 {
        epsilon_from_pair(self.p1, self.p2)
    }

    /// Single-round privacy level of the full double response.
    pub fn epsilon_one(&self) -> f64 {
        epsilon_from_pair(self.p5(), self.p6())
    }
}

/// `ln` of the largest of the four likelihood ratios between answer
/// distributions under "have" vs "not have". Ratios of the form `x/0`
/// with `x > 0` force the level to infinity; `0/0` ratios say nothing
/// about distinguishability and are left out of the max.
pub fn epsilon_from_pair(p_in: f64, p_out: f64) -> f64 {
    let mut worst: f64 = 1.0;
    for (num, den) in [
        (p_in, p_out),
        (p_out, p_in),
        (1.0 - p_in, 1.0 - p_out),
        (1.0 - p_out, 1.0 - p_in),
    ] {
        if num == 0.0 && den == 0.0 {
            continue;
        }
        if den == 0.0 {
            return f64::INFINITY;
        }
        worst = worst.max(num / den);
    }
    worst.ln()
}

pub fn epsilon_infinity(p1: f64, p2: f64) -> f64 {
    epsilon_from_pair(p1, p2)
}

pub fn epsilon_one(p5: f64, p6: f64) -> f64 {
    epsilon_from_pair(p5, p6)
}

/// Permanent answers memoized across rounds within one period. Membership
/// never changes once recorded.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Memoization {
    yes: BTreeSet<Index>,
    no: BTreeSet<Index>,
    period_id: u64,
}

impl Memoization {
    pub fn new(period_id: u64) -> Self {
        Self {
            yes: BTreeSet::new(),
            no: BTreeSet::new(),
            period_id,
        }
    }

    pub fn period_id(&self) -> u64 {
        self.period_id
    }

    pub fn yes_set(&self) -> &BTreeSet<Index> {
        &self.yes
    }

    pub fn no_set(&self) -> &BTreeSet<Index> {
        &self.no
    }

    pub fn is_memoized(&self, j: Index) -> bool {
        self.yes.contains(&j) || self.no.contains(&j)
    }

    /// Entering a new period discards all permanent answers.
    pub fn roll_period(&mut self, period_id: u64) {
        if period_id != self.period_id {
            self.yes.clear();
            self.no.clear();
            self.period_id = period_id;
        }
    }

    fn check_disjoint(&self) -> Result<(), PerturbError> {
        if let Some(&j) = self.yes.intersection(&self.no).next() {
            return Err(PerturbError::CorruptMemo(j));
        }
        Ok(())
    }

    /// Versioned binary memo file: sorted yes/no index lists plus the
    /// period identifier.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), PerturbError> {
        w.write_all(MEMO_MAGIC)?;
        w.write_all(&MEMO_VERSION.to_le_bytes())?;
        w.write_all(&self.period_id.to_le_bytes())?;
        for set in [&self.yes, &self.no] {
            w.write_all(&(set.len() as u64).to_le_bytes())?;
            for &j in set {
                w.write_all(&j.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_to_path(&self, path: &Path) -> Result<(), PerturbError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self, PerturbError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MEMO_MAGIC {
            return Err(PerturbError::BadMemoFile("wrong magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != MEMO_VERSION {
            return Err(PerturbError::BadMemoFile("unsupported version".into()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let period_id = u64::from_le_bytes(b8);
        let mut sets = [BTreeSet::new(), BTreeSet::new()];
        for set in &mut sets {
            r.read_exact(&mut b8)?;
            let len = u64::from_le_bytes(b8);
            for _ in 0..len {
                r.read_exact(&mut b4)?;
                set.insert(u32::from_le_bytes(b4));
            }
        }
        let [yes, no] = sets;
        let memo = Self {
            yes,
            no,
            period_id,
        };
        memo.check_disjoint()
            .map_err(|_| PerturbError::BadMemoFile("yes/no overlap".into()))?;
        Ok(memo)
    }

    pub fn load_from_path(path: &Path) -> Result<Self, PerturbError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::load(&mut f)
    }
}

/// Permanent randomized response: every union index not yet memoized gets
/// a permanent yes/no answer, with probability `p1` of yes if real and
/// `p2` otherwise. Already-memoized indices are untouched. Real indices
/// outside the union are ignored this round.
pub fn permanent_rr(
    real_set: &BTreeSet<Index>,
    union: &BTreeSet<Index>,
    memo: &mut Memoization,
    p1: f64,
    p2: f64,
    rng: &mut impl Rng,
) -> Result<(), PerturbError> {
    memo.check_disjoint()?;
    for &j in union {
        if memo.is_memoized(j) {
            continue;
        }
        let p = if real_set.contains(&j) { p1 } else { p2 };
        if rng.random::<f64>() < p {
            memo.yes.insert(j);
        } else {
            memo.no.insert(j);
        }
    }
    Ok(())
}

/// Instantaneous randomized response over memoized answers: a union index
/// joins the perturbed set with probability `p3` if memoized yes, `p4` if
/// memoized no. Fresh randomness every call. Every union index must have
/// been covered by [`permanent_rr`] first.
pub fn instantaneous_rr(
    memo: &Memoization,
    union: &BTreeSet<Index>,
    p3: f64,
    p4: f64,
    rng: &mut impl Rng,
) -> Result<BTreeSet<Index>, PerturbError> {
    let mut out = BTreeSet::new();
    for &j in union {
        let p = if memo.yes.contains(&j) {
            p3
        } else if memo.no.contains(&j) {
            p4
        } else {
            return Err(PerturbError::MemoGap(j));
        };
        if rng.random::<f64>() < p {
            out.insert(j);
        }
    }
    Ok(out)
}

/// Both stages in sequence: the full per-round perturbation.
pub fn perturb_index_set(
    real_set: &BTreeSet<Index>,
    union: &BTreeSet<Index>,
    memo: &mut Memoization,
    params: &ProbabilityParams,
    rng: &mut impl Rng,
) -> Result<BTreeSet<Index>, PerturbError> {
    permanent_rr(real_set, union, memo, params.p1, params.p2, rng)?;
    instantaneous_rr(memo, union, params.p3, params.p4, rng)
}

/// Probability that, for an index held by `n_j1` live clients and absent
/// from `n_j0`, the aggregate exposes exactly one owner's update (`p7`)
/// or certifies non-owners through an all-zero aggregate (`p8`).
/// Fractional counts are accepted so dataset-averaged figures can be
/// reproduced the way they were computed.
pub fn event_probs(p5: f64, p6: f64, n_j1: f64, n_j0: f64) -> (f64, f64) {
    let p7 = if n_j1 <= 0.0 {
        0.0
    } else {
        p5 * (1.0 - p5).powf(n_j1 - 1.0) * (1.0 - p6).powf(n_j0)
    };
    let p8 = (1.0 - p5).powf(n_j1) * (1.0 - (1.0 - p6).powf(n_j0));
    (p7, p8)
}

/// Averages `event_probs` over a per-index distribution of
/// `(n_j1, n_j0, weight)` triples, the way dataset-level figures are
/// reported.
pub fn event_probs_averaged(p5: f64, p6: f64, counts: &[(f64, f64, f64)]) -> (f64, f64) {
    let total: f64 = counts.iter().map(|&(_, _, w)| w).sum();
    if total == 0.0 {
        return (0.0, 0.0);
    }
    let mut p7 = 0.0;
    let mut p8 = 0.0;
    for &(n_j1, n_j0, w) in counts {
        let (a, b) = event_probs(p5, p6, n_j1, n_j0);
        p7 += w * a;
        p8 += w * b;
    }
    (p7 / total, p8 / total)
}

/// Tuning policy for the threshold on `p5` below which `p7` increases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuningPolicy {
    /// `p6` held fixed while `p5` moves.
    FixedP6,
    /// `p5 + p6 = 1` maintained while `p5` moves.
    ComplementSum,
}

/// The stationary point of `p7` as a function of `p5` under the given
/// policy: `p7` increases in `p5` below the threshold and decreases above
/// it.
pub fn p7_tuning_threshold(
    n_j1: f64,
    n_j0: f64,
    policy: TuningPolicy,
) -> Result<f64, PerturbError> {
    if n_j1 <= 0.0 {
        return Err(PerturbError::TuningUndefined);
    }
    Ok(match policy {
        TuningPolicy::FixedP6 => 1.0 / n_j1,
        TuningPolicy::ComplementSum => (n_j0 + 1.0) / (n_j0 + n_j1),
    })
}
