//! Global model storage: an `m x d` parameter matrix whose rows are served
//! as submodels by index set and updated with count-weighted aggregates.
//! Parameters are kept as 64-bit reals here; fixed-point conversion is the
//! business of [`crate::quant`] only.

use std::io::{Read, Write};
use std::path::Path;

use crate::Index;

const CHECKPOINT_MAGIC: &[u8; 8] = b"SFSLMDL\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("index {index} out of range [1, {rows}]")]
    IndexOutOfRange { index: Index, rows: u32 },
    #[error("non-finite value in update for row {index}")]
    NonFiniteUpdate { index: Index },
    #[error("submodel shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// The full model at the server: row-major `m x d` weights over the full
/// index set `{1..m}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    rows: u32,
    cols: u32,
    weights: Vec<f64>,
}

/// A client's downloaded slice of the global model, addressed by a strictly
/// sorted, duplicate-free index list.
#[derive(Debug, Clone, PartialEq)]
pub struct Submodel {
    pub index_list: Vec<Index>,
    pub rows: Vec<f64>,
    pub cols: u32,
}

impl GlobalModel {
    pub fn zeros(rows: u32, cols: u32) -> Self {
        assert!(rows >= 1 && cols >= 1, "model must be non-empty");
        Self {
            rows,
            cols,
            weights: vec![0.0; rows as usize * cols as usize],
        }
    }

    /// Seeded random initialization, entries uniform in [-scale, scale].
    pub fn random(rows: u32, cols: u32, scale: f64, rng: &mut impl rand::Rng) -> Self {
        let mut m = Self::zeros(rows, cols);
        for w in &mut m.weights {
            *w = rng.random_range(-scale..=scale);
        }
        m
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    /// The full index set `S = {1..m}`.
    pub fn full_index_set(&self) -> impl Iterator<Item = Index> {
        1..=self.rows
    }

    pub fn row(&self, index: Index) -> Result<&[f64], ModelError> {
        self.check_index(index)?;
        let off = (index as usize - 1) * self.cols as usize;
        Ok(&self.weights[off..off + self.cols as usize])
    }

    fn check_index(&self, index: Index) -> Result<(), ModelError> {
        if index == 0 || index > self.rows {
            return Err(ModelError::IndexOutOfRange {
                index,
                rows: self.rows,
            });
        }
        Ok(())
    }

    /// Copies out the rows named by `indices`, in sorted index order.
    pub fn extract_submodel(&self, indices: &[Index]) -> Result<Submodel, ModelError> {
        let mut sorted: Vec<Index> = indices.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut rows = Vec::with_capacity(sorted.len() * self.cols as usize);
        for &j in &sorted {
            rows.extend_from_slice(self.row(j)?);
        }
        Ok(Submodel {
            index_list: sorted,
            rows,
            cols: self.cols,
        })
    }

    /// Applies one round's aggregate for row `j`: adds `sum_update /
    /// total_count` to the row. A zero total count is a no-op, not an
    /// error: lanes introduced by union false positives legitimately
    /// collect no submissions.
    pub fn apply_row_aggregate(
        &mut self,
        j: Index,
        sum_update: &[f64],
        total_count: u64,
    ) -> Result<(), ModelError> {
        self.check_index(j)?;
        if sum_update.len() != self.cols as usize {
            return Err(ModelError::ShapeMismatch(format!(
                "row update has {} entries, model has {} columns",
                sum_update.len(),
                self.cols
            )));
        }
        if sum_update.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteUpdate { index: j });
        }
        if total_count == 0 {
            return Ok(());
        }
        let off = (j as usize - 1) * self.cols as usize;
        let denom = total_count as f64;
        for (w, u) in self.weights[off..off + self.cols as usize]
            .iter_mut()
            .zip(sum_update)
        {
            *w += u / denom;
        }
        Ok(())
    }

    /// Binary checkpoint: magic, version, m, d, then row-major 64-bit
    /// little-endian parameters.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.rows.to_le_bytes())?;
        w.write_all(&self.cols.to_le_bytes())?;
        for v in &self.weights {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save_to_path(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadCheckpoint("wrong magic".into()));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::BadCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        r.read_exact(&mut buf4)?;
        let rows = u32::from_le_bytes(buf4);
        r.read_exact(&mut buf4)?;
        let cols = u32::from_le_bytes(buf4);
        if rows == 0 || cols == 0 {
            return Err(ModelError::BadCheckpoint("empty dimensions".into()));
        }
        let n = rows as usize * cols as usize;
        let mut weights = Vec::with_capacity(n);
        let mut buf8 = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf8)?;
            let v = f64::from_le_bytes(buf8);
            if !v.is_finite() {
                return Err(ModelError::BadCheckpoint("non-finite parameter".into()));
            }
            weights.push(v);
        }
        Ok(Self {
            rows,
            cols,
            weights,
        })
    }

    pub fn load_from_path(path: &Path) -> Result<Self, ModelError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::load(&mut f)
    }
}

impl Submodel {
    pub fn row_count(&self) -> usize {
        self.index_list.len()
    }

    /// Row slice for the given position in `index_list`.
    pub fn row_at(&self, pos: usize) -> &[f64] {
        let c = self.cols as usize;
        &self.rows[pos * c..(pos + 1) * c]
    }

    pub fn row_for_index(&self, index: Index) -> Option<&[f64]> {
        self.index_list
            .binary_search(&index)
            .ok()
            .map(|pos| self.row_at(pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn model_10x2() -> GlobalModel {
        let mut m = GlobalModel::zeros(10, 2);
        for j in 1..=10u32 {
            m.apply_row_aggregate(j, &[j as f64, -(j as f64)], 1).unwrap();
        }
        m
    }

    #[test]
    fn extract_selects_rows_in_sorted_order() {
        let m = model_10x2();
        let s = m.extract_submodel(&[9, 2, 6, 4]).unwrap();
        assert_eq!(s.index_list, vec![2, 4, 6, 9]);
        assert_eq!(s.row_at(0), &[2.0, -2.0]);
        assert_eq!(s.row_at(3), &[9.0, -9.0]);
    }

    #[test]
    fn extract_empty_set() {
        let m = model_10x2();
        let s = m.extract_submodel(&[]).unwrap();
        assert_eq!(s.row_count(), 0);
        assert_eq!(s.cols, 2);
    }

    #[test]
    fn extract_out_of_range() {
        let m = model_10x2();
        assert!(matches!(
            m.extract_submodel(&[11]),
            Err(ModelError::IndexOutOfRange { index: 11, .. })
        ));
        assert!(matches!(
            m.extract_submodel(&[0]),
            Err(ModelError::IndexOutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn aggregate_divides_by_count() {
        let mut m = GlobalModel::zeros(3, 2);
        m.apply_row_aggregate(2, &[2.0, 4.0], 2).unwrap();
        assert_eq!(m.row(2).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_count_is_noop() {
        let mut m = model_10x2();
        let before = m.clone();
        m.apply_row_aggregate(3, &[5.0, 5.0], 0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn nonfinite_update_rejected() {
        let mut m = model_10x2();
        assert!(matches!(
            m.apply_row_aggregate(1, &[f64::NAN, 0.0], 1),
            Err(ModelError::NonFiniteUpdate { index: 1 })
        ));
    }

    #[test]
    fn single_contributor_adds_exactly_the_update() {
        // One client with count v and weighted update v * dw contributes dw.
        let mut m = GlobalModel::zeros(4, 3);
        let dw = [0.25, -0.5, 0.125];
        let v = 10u64;
        let weighted: Vec<f64> = dw.iter().map(|x| x * v as f64).collect();
        m.apply_row_aggregate(1, &weighted, v).unwrap();
        assert_eq!(m.row(1).unwrap(), &dw);
    }

    #[test]
    fn three_client_aggregate_matches_bruteforce_oracle() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let mut m = GlobalModel::random(6, 4, 1.0, &mut rng);
        let before = m.clone();

        // Three clients with per-row counts and raw updates.
        let counts = [3u64, 1, 5];
        let updates: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let total: u64 = counts.iter().sum();

        for j in 1..=6u32 {
            let mut sum = vec![0.0; 4];
            for (c, u) in counts.iter().zip(&updates) {
                for (s, x) in sum.iter_mut().zip(u) {
                    *s += *c as f64 * x;
                }
            }
            m.apply_row_aggregate(j, &sum, total).unwrap();

            // Oracle: sum(v_i * dw_i) / sum(v_i) computed term by term.
            for k in 0..4 {
                let num: f64 = counts
                    .iter()
                    .zip(&updates)
                    .map(|(c, u)| *c as f64 * u[k])
                    .sum();
                let want = before.row(j).unwrap()[k] + num / total as f64;
                assert!((m.row(j).unwrap()[k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let m = GlobalModel::random(7, 5, 2.0, &mut rng);
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = GlobalModel::load(&mut buf.as_slice()).unwrap();
        assert_eq!(m, back);
        // header: magic 8 + version 4 + m 4 + d 4
        assert_eq!(buf.len(), 20 + 7 * 5 * 8);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let err = GlobalModel::load(&mut &b"not a checkpoint"[..]);
        assert!(matches!(err, Err(ModelError::BadCheckpoint(_))));
    }
}
