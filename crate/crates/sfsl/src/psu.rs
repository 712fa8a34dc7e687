//! Private set union. Each client encodes her index set as a Bloom filter
//! and a per-partition indicator vector, replaces every set bit with a
//! uniform draw from `Z_R`, and submits both vectors to masked summation.
//! From the two sums the server learns which filter lanes are nonzero --
//! and therefore the union -- but each nonzero lane is uniform over `Z_R`
//! no matter how many clients set it, so per-client membership and counts
//! stay hidden. An all-partitions indicator of zero prunes whole ranges of
//! candidate indices before the per-index filter probe.

use std::collections::BTreeSet;

use rand::Rng;

use crate::Index;

#[derive(Debug, thiserror::Error)]
pub enum PsuError {
    #[error("false positive rate {0} outside (0, 1]")]
    InvalidRate(f64),
    #[error("invalid parameter: {0}")]
    BadParams(String),
    #[error("vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Hash family used to place indices into filter lanes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum HashConfig {
    /// Double hashing `g_k(x) = h1(x) + k * h2(x) mod len` from one seeded
    /// 64-bit mix; the seed is broadcast per round so all clients agree.
    Seeded { seed: u64 },
    /// Degenerate mode with `len` equal to the domain size and the index
    /// itself as the only hash. Exact (no false positives), used when the
    /// sized filter would be longer than the domain.
    Identity,
}

/// Bloom filter geometry.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BloomParams {
    /// Lane count.
    pub len: u32,
    /// Hashes per element.
    pub hashes: u32,
    /// Expected union cardinality the filter was sized for.
    pub capacity: u32,
    /// Desired false positive rate in (0, 1].
    pub target_fpr: f64,
    pub hash: HashConfig,
}

/// Optimal lane count for `capacity` elements at the target false positive
/// rate: `ceil(-capacity * ln(fpr) / (ln 2)^2)`, at least 1.
pub fn optimal_length(capacity: u32, target_fpr: f64) -> Result<u32, PsuError> {
    if !(target_fpr > 0.0 && target_fpr <= 1.0) {
        return Err(PsuError::InvalidRate(target_fpr));
    }
    if capacity < 1 {
        return Err(PsuError::BadParams("capacity must be at least 1".into()));
    }
    let ln2 = std::f64::consts::LN_2;
    let len = (-(capacity as f64) * target_fpr.ln() / (ln2 * ln2)).ceil();
    Ok((len as u32).max(1))
}

/// Optimal hash count for a filter of `len` lanes holding `capacity`
/// elements: `round(ln 2 * len / capacity)`, at least 1.
pub fn optimal_hash_count(len: u32, capacity: u32) -> u32 {
    let h = (std::f64::consts::LN_2 * len as f64 / capacity as f64).round();
    (h as u32).max(1)
}

impl BloomParams {
    /// Sizes the filter from the expected union cardinality and target
    /// rate.
    pub fn sized(capacity: u32, target_fpr: f64, seed: u64) -> Result<Self, PsuError> {
        let len = optimal_length(capacity, target_fpr)?;
        Ok(Self {
            len,
            hashes: optimal_hash_count(len, capacity),
            capacity,
            target_fpr,
            hash: HashConfig::Seeded { seed },
        })
    }

    /// One lane per domain index, identity hash. False positive rate zero.
    pub fn identity(domain: u32) -> Self {
        Self {
            len: domain,
            hashes: 1,
            capacity: domain,
            target_fpr: 0.0,
            hash: HashConfig::Identity,
        }
    }

    /// Sized filter, except when it would be at least as long as the
    /// domain, in which case the exact identity configuration wins.
    pub fn sized_or_identity(
        capacity: u32,
        target_fpr: f64,
        domain: u32,
        seed: u64,
    ) -> Result<Self, PsuError> {
        let sized = Self::sized(capacity, target_fpr, seed)?;
        if sized.len >= domain {
            Ok(Self::identity(domain))
        } else {
            Ok(sized)
        }
    }

    /// The `hashes` lane positions for one index.
    pub fn lanes_of(&self, index: Index) -> impl Iterator<Item = usize> + '_ {
        let len = self.len as u64;
        let (h1, h2) = match self.hash {
            HashConfig::Identity => ((index as u64 - 1) % len, 0),
            HashConfig::Seeded { seed } => {
                let a = mix64(seed ^ mix64(index as u64));
                let b = mix64(a ^ 0x9e3779b97f4a7c15);
                let mut step = b % len;
                if step == 0 {
                    step = 1;
                }
                (a % len, step)
            }
        };
        (0..self.hashes as u64).map(move |k| ((h1 + k * h2) % len) as usize)
    }
}

/// splitmix64 finalizer; stable across platforms.
fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Contiguous partitions of the full index domain `[1, m]`. Lookup is
/// total: every in-domain index belongs to exactly one partition.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PartitionScheme {
    /// First index of each partition, strictly increasing, starting at 1.
    starts: Vec<Index>,
    domain: Index,
}

impl PartitionScheme {
    pub const DEFAULT_WIDTH: u32 = 4096;

    pub fn from_starts(starts: Vec<Index>, domain: Index) -> Result<Self, PsuError> {
        if starts.first() != Some(&1) {
            return Err(PsuError::BadParams("partitions must start at 1".into()));
        }
        if !starts.windows(2).all(|w| w[0] < w[1]) || *starts.last().unwrap() > domain {
            return Err(PsuError::BadParams(
                "partition starts must be strictly increasing within the domain".into(),
            ));
        }
        Ok(Self { starts, domain })
    }

    /// `count` contiguous partitions over `[1, domain]` with sizes as
    /// equal as the division allows.
    pub fn equal_width(domain: Index, count: u32) -> Result<Self, PsuError> {
        if domain < 1 || count < 1 || count > domain {
            return Err(PsuError::BadParams(format!(
                "cannot split domain {domain} into {count} partitions"
            )));
        }
        let base = domain / count;
        let extra = domain % count;
        let mut starts = Vec::with_capacity(count as usize);
        let mut next = 1u32;
        for p in 0..count {
            starts.push(next);
            next += base + u32::from(p < extra);
        }
        Self::from_starts(starts, domain)
    }

    /// Default partitioning: equal widths of about 4096 indices.
    pub fn default_for_domain(domain: Index) -> Self {
        let count = domain.div_ceil(Self::DEFAULT_WIDTH).max(1);
        Self::equal_width(domain, count).expect("default partitioning is valid")
    }

    pub fn count(&self) -> usize {
        self.starts.len()
    }

    pub fn domain(&self) -> Index {
        self.domain
    }

    pub fn starts(&self) -> &[Index] {
        &self.starts
    }

    /// Partition number of an in-domain index.
    pub fn lookup(&self, index: Index) -> usize {
        debug_assert!(index >= 1 && index <= self.domain);
        self.starts.partition_point(|&s| s <= index) - 1
    }

    /// Index range `[start, end]` of partition `p`.
    pub fn range(&self, p: usize) -> (Index, Index) {
        let start = self.starts[p];
        let end = if p + 1 < self.starts.len() {
            self.starts[p + 1] - 1
        } else {
            self.domain
        };
        (start, end)
    }
}

/// A bit vector whose set bits were replaced by uniform draws from `Z_R`.
/// Zeros stay zero, so a lane sum over clients is zero exactly when no
/// client set the bit (up to the `1/R` wraparound chance).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbedFilter {
    pub values: Vec<u32>,
    pub modulus: u64,
}

/// Encodes an index set into a Bloom filter bit vector.
pub fn encode(indices: &BTreeSet<Index>, params: &BloomParams) -> Vec<bool> {
    let mut bits = vec![false; params.len as usize];
    for &j in indices {
        for lane in params.lanes_of(j) {
            bits[lane] = true;
        }
    }
    bits
}

/// Membership probe in the clear; inserted indices always test positive.
pub fn contains(bits: &[bool], index: Index, params: &BloomParams) -> bool {
    params.lanes_of(index).all(|lane| bits[lane])
}

/// Indicator bit vector: bit `p` is set when some index falls into
/// partition `p`.
pub fn partition_indicator(indices: &BTreeSet<Index>, scheme: &PartitionScheme) -> Vec<bool> {
    let mut bits = vec![false; scheme.count()];
    for &j in indices {
        bits[scheme.lookup(j)] = true;
    }
    bits
}

/// How set bits are replaced with random integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DrawRange {
    /// Uniform over all of `Z_R`, zero included. Keeps summed lanes
    /// exactly uniform; a per-lane false negative slips in with
    /// probability `1/R`.
    FullRange,
    /// Uniform over `{1, .., R-1}`. No single-contributor false
    /// negatives, but summed lanes are no longer exactly uniform.
    PositiveOnly,
}

/// Replaces every set bit with an independent uniform draw from `Z_R`.
pub fn perturb_filter(
    bits: &[bool],
    modulus: u64,
    range: DrawRange,
    rng: &mut impl Rng,
) -> PerturbedFilter {
    debug_assert!(modulus >= 2 && modulus <= 1 << 32);
    let values = bits
        .iter()
        .map(|&b| {
            if !b {
                0
            } else {
                match range {
                    DrawRange::FullRange => rng.random_range(0..modulus) as u32,
                    DrawRange::PositiveOnly => rng.random_range(1..modulus) as u32,
                }
            }
        })
        .collect();
    PerturbedFilter { values, modulus }
}

/// Lane-wise modular sum of perturbed vectors; stands in for the masked
/// summation output in tests and oracles.
pub fn sum_perturbed(filters: &[PerturbedFilter], modulus: u64) -> Result<Vec<u32>, PsuError> {
    let len = filters.first().map(|f| f.values.len()).unwrap_or(0);
    let mut acc = vec![0u32; len];
    for f in filters {
        if f.values.len() != len {
            return Err(PsuError::LengthMismatch {
                expected: len,
                got: f.values.len(),
            });
        }
        for (a, &v) in acc.iter_mut().zip(&f.values) {
            *a = ((*a as u64 + v as u64) % modulus) as u32;
        }
    }
    Ok(acc)
}

/// Reconstructs the union from the two summed vectors. Candidates are the
/// indices of partitions whose indicator lane is nonzero; a candidate is
/// in the union when all of its filter lanes are nonzero.
pub fn reconstruct_union(
    sum_filter: &[u32],
    sum_indicator: &[u32],
    scheme: &PartitionScheme,
    params: &BloomParams,
) -> Result<BTreeSet<Index>, PsuError> {
    if sum_filter.len() != params.len as usize {
        return Err(PsuError::LengthMismatch {
            expected: params.len as usize,
            got: sum_filter.len(),
        });
    }
    if sum_indicator.len() != scheme.count() {
        return Err(PsuError::LengthMismatch {
            expected: scheme.count(),
            got: sum_indicator.len(),
        });
    }
    let mut union = BTreeSet::new();
    for p in 0..scheme.count() {
        if sum_indicator[p] == 0 {
            continue;
        }
        let (start, end) = scheme.range(p);
        for j in start..=end {
            if params.lanes_of(j).all(|lane| sum_filter[lane] != 0) {
                union.insert(j);
            }
        }
    }
    Ok(union)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn optimal_length_paper_scale() {
        let len = optimal_length(32904, 1e-4).unwrap();
        assert!(len == 630_774 || len == 630_775, "got {len}");
    }

    #[test]
    fn optimal_length_formula_and_clamp() {
        // 1000 * ln(100) / (ln 2)^2 = 9585.06 -> 9586
        assert_eq!(optimal_length(1000, 1e-2).unwrap(), 9586);
        // fpr 1 carries no information; clamped to one lane
        assert_eq!(optimal_length(50, 1.0).unwrap(), 1);
        assert!(matches!(
            optimal_length(10, 0.0),
            Err(PsuError::InvalidRate(_))
        ));
        assert!(matches!(
            optimal_length(10, -0.5),
            Err(PsuError::InvalidRate(_))
        ));
    }

    #[test]
    fn optimal_hash_count_values() {
        assert_eq!(optimal_hash_count(9586, 1000), 7); // round(6.645)
        assert_eq!(optimal_hash_count(100, 100), 1); // round(0.693) clamped
        assert_eq!(optimal_hash_count(19170, 1000), 13); // len/cap = 19.17
    }

    #[test]
    fn encode_identity_sets_exact_bits() {
        let params = BloomParams::identity(8);
        let bits = encode(&[1, 2, 4].into_iter().collect(), &params);
        assert_eq!(
            bits,
            vec![true, true, false, true, false, false, false, false]
        );
    }

    #[test]
    fn encode_empty_is_all_zero() {
        let params = BloomParams::sized(100, 0.01, 7).unwrap();
        assert!(encode(&BTreeSet::new(), &params).iter().all(|b| !b));
    }

    #[test]
    fn no_false_negatives_in_the_clear() {
        let params = BloomParams::sized(500, 1e-2, 13).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let set: BTreeSet<Index> = (0..500).map(|_| rng.random_range(1..1_000_000)).collect();
        let bits = encode(&set, &params);
        for &j in &set {
            assert!(contains(&bits, j, &params));
        }
    }

    #[test]
    fn measured_fpr_near_target() {
        let target = 1e-2;
        let params = BloomParams::sized(500, target, 99).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut set = BTreeSet::new();
        while set.len() < 500 {
            set.insert(rng.random_range(1..=200_000u32));
        }
        let bits = encode(&set, &params);
        let mut probes = 0u32;
        let mut hits = 0u32;
        let mut candidate = 200_001u32;
        while probes < 100_000 {
            // Everything above 200000 is a guaranteed non-member.
            if contains(&bits, candidate, &params) {
                hits += 1;
            }
            probes += 1;
            candidate += 1;
        }
        let measured = hits as f64 / probes as f64;
        assert!(
            measured > 0.2 * target && measured < 3.0 * target,
            "measured fpr {measured}"
        );
    }

    #[test]
    fn union_of_filters_is_lossless() {
        // OR of per-set filters equals the filter of the union set.
        let params = BloomParams::sized(300, 1e-3, 5).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let sets: Vec<BTreeSet<Index>> = (0..4)
            .map(|_| (0..80).map(|_| rng.random_range(1..50_000)).collect())
            .collect();
        let mut ored = vec![false; params.len as usize];
        let mut union = BTreeSet::new();
        for s in &sets {
            for (o, b) in ored.iter_mut().zip(encode(s, &params)) {
                *o |= b;
            }
            union.extend(s);
        }
        assert_eq!(ored, encode(&union, &params));
    }

    #[test]
    fn partition_indicator_buckets() {
        let scheme = PartitionScheme::equal_width(100, 10).unwrap();
        let bits = partition_indicator(&[5, 87].into_iter().collect(), &scheme);
        let mut want = vec![false; 10];
        want[0] = true;
        want[8] = true;
        assert_eq!(bits, want);
        assert!(partition_indicator(&BTreeSet::new(), &scheme)
            .iter()
            .all(|b| !b));
    }

    #[test]
    fn partition_indicator_matches_scan_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..20 {
            let domain = rng.random_range(10..5000u32);
            let count = rng.random_range(1..=domain.min(64));
            let scheme = PartitionScheme::equal_width(domain, count).unwrap();
            let set: BTreeSet<Index> = (0..rng.random_range(0..200))
                .map(|_| rng.random_range(1..=domain))
                .collect();
            let got = partition_indicator(&set, &scheme);
            // Oracle: scan every partition range for a member.
            for p in 0..scheme.count() {
                let (a, b) = scheme.range(p);
                let expect = set.iter().any(|&j| j >= a && j <= b);
                assert_eq!(got[p], expect, "partition {p} of [{a},{b}]");
            }
        }
    }

    #[test]
    fn partition_lookup_is_total_and_consistent() {
        for (domain, count) in [(1u32, 1u32), (7, 3), (4096, 1), (100_000, 25)] {
            let scheme = PartitionScheme::equal_width(domain, count).unwrap();
            for j in 1..=domain {
                let p = scheme.lookup(j);
                let (a, b) = scheme.range(p);
                assert!(j >= a && j <= b);
            }
        }
    }

    #[test]
    fn perturb_preserves_zeros() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let bits = vec![false, true, false, true];
        let f = perturb_filter(&bits, 1 << 32, DrawRange::FullRange, &mut rng);
        assert_eq!(f.values[0], 0);
        assert_eq!(f.values[2], 0);
        let all_zero = perturb_filter(&[false; 16], 1 << 32, DrawRange::FullRange, &mut rng);
        assert!(all_zero.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn positive_only_draws_exclude_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let f = perturb_filter(&vec![true; 4096], 4, DrawRange::PositiveOnly, &mut rng);
        assert!(f.values.iter().all(|&v| v >= 1 && v < 4));
    }

    #[test]
    fn identity_reconstruction_is_exact() {
        let params = BloomParams::identity(10);
        let scheme = PartitionScheme::equal_width(10, 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let sets: Vec<BTreeSet<Index>> = vec![
            [1, 2, 4].into_iter().collect(),
            [2, 4, 6, 9].into_iter().collect(),
        ];
        let filters: Vec<PerturbedFilter> = sets
            .iter()
            .map(|s| perturb_filter(&encode(s, &params), 1 << 32, DrawRange::FullRange, &mut rng))
            .collect();
        let indicators: Vec<PerturbedFilter> = sets
            .iter()
            .map(|s| {
                perturb_filter(
                    &partition_indicator(s, &scheme),
                    1 << 32,
                    DrawRange::FullRange,
                    &mut rng,
                )
            })
            .collect();
        let sum_f = sum_perturbed(&filters, 1 << 32).unwrap();
        let sum_i = sum_perturbed(&indicators, 1 << 32).unwrap();
        let union = reconstruct_union(&sum_f, &sum_i, &scheme, &params).unwrap();
        assert_eq!(union, [1, 2, 4, 6, 9].into_iter().collect());
    }

    #[test]
    fn empty_clients_yield_empty_union() {
        let params = BloomParams::identity(16);
        let scheme = PartitionScheme::equal_width(16, 4).unwrap();
        let sum_f = vec![0u32; 16];
        let sum_i = vec![0u32; 4];
        let union = reconstruct_union(&sum_f, &sum_i, &scheme, &params).unwrap();
        assert!(union.is_empty());
    }

    #[test]
    fn zero_indicator_partition_is_never_reported() {
        // Force a filter false positive in partition 1 while only
        // partition 0 has members; the indicator must veto it.
        let params = BloomParams {
            len: 2,
            hashes: 1,
            capacity: 8,
            target_fpr: 0.5,
            hash: HashConfig::Seeded { seed: 1 },
        };
        let scheme = PartitionScheme::equal_width(8, 2).unwrap();
        let sum_f = vec![1u32, 1u32]; // every filter lane nonzero
        let sum_i = vec![1u32, 0u32];
        let union = reconstruct_union(&sum_f, &sum_i, &scheme, &params).unwrap();
        assert!(union.iter().all(|&j| j <= 4), "union {union:?}");
    }

    #[test]
    fn reconstruct_checks_lengths() {
        let params = BloomParams::identity(4);
        let scheme = PartitionScheme::equal_width(4, 2).unwrap();
        assert!(matches!(
            reconstruct_union(&[0; 3], &[0; 2], &scheme, &params),
            Err(PsuError::LengthMismatch { .. })
        ));
        assert!(matches!(
            reconstruct_union(&[0; 4], &[0; 1], &scheme, &params),
            Err(PsuError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn seeded_reconstruction_matches_bruteforce_union() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let domain = 20_000u32;
        for trial in 0..5 {
            let params = BloomParams::sized(1500, 1e-4, 40 + trial).unwrap();
            let scheme = PartitionScheme::default_for_domain(domain);
            let sets: Vec<BTreeSet<Index>> = (0..6)
                .map(|_| (0..200).map(|_| rng.random_range(1..=domain)).collect())
                .collect();
            let mut expect = BTreeSet::new();
            for s in &sets {
                expect.extend(s);
            }
            let filters: Vec<_> = sets
                .iter()
                .map(|s| {
                    perturb_filter(&encode(s, &params), 1 << 32, DrawRange::FullRange, &mut rng)
                })
                .collect();
            let indicators: Vec<_> = sets
                .iter()
                .map(|s| {
                    perturb_filter(
                        &partition_indicator(s, &scheme),
                        1 << 32,
                        DrawRange::FullRange,
                        &mut rng,
                    )
                })
                .collect();
            let sum_f = sum_perturbed(&filters, 1 << 32).unwrap();
            let sum_i = sum_perturbed(&indicators, 1 << 32).unwrap();
            let union = reconstruct_union(&sum_f, &sum_i, &scheme, &params).unwrap();
            // Superset up to wraparound false negatives (none expected at
            // this modulus), subset up to the target false positive rate.
            assert!(union.is_superset(&expect), "trial {trial} lost indices");
            let extras = union.difference(&expect).count();
            assert!(extras <= 10, "trial {trial}: {extras} false positives");
        }
    }
}
