//! Lateral Hebbian connections between two maps.
//!
//! A [`LateralMatrix`] holds one weight per (neuron of map x, neuron of map y)
//! pair. Training only ever adds `mu * a_x * a_y` to the cell joining the two
//! BMUs of a synchronized sample pair, so the matrix starts at zero and every
//! cell grows monotonically.

use std::path::Path;

use crate::error::{check_len, ResomError, Result};
use crate::io::{put_f64s, write_atomic, ByteReader};
use crate::som::SomMap;

const MAGIC: &[u8; 4] = b"RLAT";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct LateralMatrix {
    rows: usize,
    cols: usize,
    mu: f64,
    weights: Vec<f64>,
    /// Nonzero count the first `prune` ranked against. Kept so that pruning
    /// again at the same fraction is a no-op.
    prune_base: Option<usize>,
}

impl PartialEq for LateralMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.mu == other.mu
            && self.weights == other.weights
    }
}

/// Fraction of nonzero cells recorded while a matrix trains.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparsityStats {
    pub nonzero_fraction: f64,
    /// `(pairs processed, nonzero fraction)` checkpoints.
    pub history: Vec<(usize, f64)>,
}

impl LateralMatrix {
    pub fn zeros(rows: usize, cols: usize, mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(ResomError::param(format!("mu must be > 0 (got {mu})")));
        }
        if rows == 0 || cols == 0 {
            return Err(ResomError::param(
                "lateral matrix needs at least one row and column",
            ));
        }
        Ok(Self {
            rows,
            cols,
            mu,
            weights: vec![0.0; rows * cols],
            prune_base: None,
        })
    }

    /// All-zero matrix joining the neurons of `map_x` (rows) to `map_y` (cols).
    pub fn for_maps(map_x: &SomMap, map_y: &SomMap, mu: f64) -> Result<Self> {
        Self::zeros(map_x.neurons(), map_y.neurons(), mu)
    }

    pub fn from_weights(rows: usize, cols: usize, mu: f64, weights: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(rows, cols, mu)?;
        check_len("lateral weights", rows * cols, weights.len())?;
        if let Some(bad) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(ResomError::param(format!(
                "lateral weight {bad} is negative or not finite"
            )));
        }
        m.weights = weights;
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.weights[row * self.cols..(row + 1) * self.cols]
    }

    /// Multiplies every weight by `factor > 0`.
    pub fn scale(&mut self, factor: f64) -> Result<()> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(ResomError::param(format!(
                "scale factor must be > 0 (got {factor})"
            )));
        }
        self.weights.iter_mut().for_each(|w| *w *= factor);
        Ok(())
    }

    /// Hebbian reinforcement of the BMU–BMU cell: `W[x][y] += mu * a_x * a_y`.
    pub fn hebb_update(&mut self, bmu_x: usize, a_x: f64, bmu_y: usize, a_y: f64) -> Result<()> {
        if bmu_x >= self.rows {
            return Err(ResomError::Index {
                context: "lateral rows",
                index: bmu_x,
                len: self.rows,
            });
        }
        if bmu_y >= self.cols {
            return Err(ResomError::Index {
                context: "lateral cols",
                index: bmu_y,
                len: self.cols,
            });
        }
        for a in [a_x, a_y] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(ResomError::param(format!("activation {a} outside (0, 1]")));
            }
        }
        self.weights[bmu_x * self.cols + bmu_y] += self.mu * a_x * a_y;
        self.prune_base = None;
        Ok(())
    }

    pub fn nonzero_count(&self) -> usize {
        self.weights.iter().filter(|w| **w > 0.0).count()
    }

    /// Fraction of cells holding a nonzero weight.
    pub fn sparsity(&self) -> f64 {
        self.nonzero_count() as f64 / self.weights.len() as f64
    }

    /// Trains on synchronized `(v_x, v_y)` pairs. The nonzero fraction is
    /// recorded every 1% of the pairs (every pair when there are fewer than
    /// 100) and after the last one.
    pub fn train<X, Y>(
        &mut self,
        map_x: &SomMap,
        map_y: &SomMap,
        pairs: &[(X, Y)],
    ) -> Result<SparsityStats>
    where
        X: AsRef<[f64]>,
        Y: AsRef<[f64]>,
    {
        check_len("lateral rows vs map x", map_x.neurons(), self.rows)?;
        check_len("lateral cols vs map y", map_y.neurons(), self.cols)?;
        if pairs.is_empty() {
            return Err(ResomError::input("no sample pairs to train on"));
        }
        let step = (pairs.len() / 100).max(1);
        let mut stats = SparsityStats::default();
        for (i, (vx, vy)) in pairs.iter().enumerate() {
            let ax = map_x.activation(vx.as_ref())?;
            let ay = map_y.activation(vy.as_ref())?;
            self.hebb_update(ax.bmu_index, ax.bmu_value, ay.bmu_index, ay.bmu_value)?;
            let done = i + 1;
            if done % step == 0 || done == pairs.len() {
                stats.history.push((done, self.sparsity()));
            }
        }
        stats.nonzero_fraction = self.sparsity();
        Ok(stats)
    }

    /// Keeps the `ceil(keep_fraction * nonzero)` strongest nonzero cells and
    /// zeroes the rest. Equal weights are ranked by `(row, col)`, earliest
    /// first.
    ///
    /// The nonzero count is taken from the matrix as it was before its first
    /// prune, so re-pruning at the same fraction leaves it unchanged.
    pub fn prune(&mut self, keep_fraction: f64) -> Result<()> {
        if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
            return Err(ResomError::param(format!(
                "keep_fraction must lie in (0, 1] (got {keep_fraction})"
            )));
        }
        let mut nonzero: Vec<usize> = (0..self.weights.len())
            .filter(|&i| self.weights[i] > 0.0)
            .collect();
        let base = *self.prune_base.get_or_insert(nonzero.len());
        let keep = keep_count(keep_fraction, base).min(nonzero.len());
        if keep < nonzero.len() {
            // stable sort keeps lexicographic (row, col) order among ties
            nonzero.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]));
            for &i in &nonzero[keep..] {
                self.weights[i] = 0.0;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.weights.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&self.mu.to_le_bytes());
        put_f64s(&mut out, &self.weights);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MAGIC)?;
        let at = r.offset();
        let version = r.u32_le("version")?;
        if version != VERSION {
            return Err(ResomError::format(
                at,
                format!("unsupported RLAT version {version}"),
            ));
        }
        let rows = r.u32_le("rows")? as usize;
        let cols = r.u32_le("cols")? as usize;
        let mu = r.f64_le("mu")?;
        let weights = r.f64_vec_le(rows * cols, "lateral weights")?;
        r.finish("RLAT matrix")?;
        Self::from_weights(rows, cols, mu, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `ceil(fraction * count)`, robust to the product landing a hair above an
/// integer (e.g. `0.1 * 30`).
fn keep_count(fraction: f64, count: usize) -> usize {
    if count == 0 {
        return 0;
    }
    let exact = fraction * count as f64;
    let rounded = exact.round();
    let n = if (exact - rounded).abs() <= 1e-9 * count as f64 {
        rounded
    } else {
        exact.ceil()
    };
    (n as usize).clamp(1, count)
}
