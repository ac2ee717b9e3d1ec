//! Kohonen self-organizing map for a single modality.
//!
//! Neurons live on a `height × width` grid, indexed row-major. Each neuron
//! carries a weight vector of `input_dim` components. Training pulls the best
//! matching unit (BMU) and its grid neighbours towards each presented sample
//! with a learning rate and neighbourhood width that both decay
//! geometrically from their initial to their final value over `t_f` steps.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, ResomError, Result};
use crate::io::{put_f64s, write_atomic, ByteReader};

const MAGIC: &[u8; 4] = b"RSOM";
const VERSION: u32 = 1;

/// Hyperparameters of one map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomParams {
    pub width: usize,
    pub height: usize,
    pub input_dim: usize,
    pub eps_i: f64,
    pub eps_f: f64,
    pub sigma_i: f64,
    pub sigma_f: f64,
    pub t_f: u64,
    /// Sharpness of the afferent activation `exp(-d / alpha)`.
    pub alpha: f64,
    pub seed: u64,
}

impl SomParams {
    /// Parameters with the default annealing schedule: learning rate 1.0 →
    /// 0.01, neighbourhood `max(width, height) / 2` → 0.5, `alpha = 1`.
    /// `t_f` defaults to 1 and is normally set from the training set size.
    pub fn new(width: usize, height: usize, input_dim: usize) -> Self {
        Self {
            width,
            height,
            input_dim,
            eps_i: 1.0,
            eps_f: 0.01,
            sigma_i: (width.max(height) as f64 / 2.0).max(0.5),
            sigma_f: 0.5,
            t_f: 1,
            alpha: 1.0,
            seed: 0,
        }
    }

    pub fn with_t_f(mut self, t_f: u64) -> Self {
        self.t_f = t_f;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_learning_rate(mut self, eps_i: f64, eps_f: f64) -> Self {
        self.eps_i = eps_i;
        self.eps_f = eps_f;
        self
    }

    pub fn with_sigma(mut self, sigma_i: f64, sigma_f: f64) -> Self {
        self.sigma_i = sigma_i;
        self.sigma_f = sigma_f;
        self
    }

    pub fn neurons(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(ResomError::param(format!(
                "width and height must be >= 1 (got {}x{})",
                self.width, self.height
            )));
        }
        if self.input_dim == 0 {
            return Err(ResomError::param("input_dim must be >= 1"));
        }
        if self.t_f == 0 {
            return Err(ResomError::param("t_f must be >= 1"));
        }
        if !(self.eps_f > 0.0 && self.eps_f <= self.eps_i && self.eps_i <= 1.0) {
            return Err(ResomError::param(format!(
                "need 0 < eps_f <= eps_i <= 1 (got eps_i={}, eps_f={})",
                self.eps_i, self.eps_f
            )));
        }
        if !(self.sigma_f > 0.0 && self.sigma_f <= self.sigma_i && self.sigma_i.is_finite()) {
            return Err(ResomError::param(format!(
                "need 0 < sigma_f <= sigma_i (got sigma_i={}, sigma_f={})",
                self.sigma_i, self.sigma_f
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ResomError::param(format!(
                "alpha must be > 0 (got {})",
                self.alpha
            )));
        }
        Ok(())
    }

    fn check_time(&self, t: u64) -> Result<()> {
        if t > self.t_f {
            return Err(ResomError::param(format!(
                "iteration {t} outside schedule range 0..={}",
                self.t_f
            )));
        }
        Ok(())
    }

    /// Learning rate at iteration `t`: `eps_i * (eps_f / eps_i)^(t / t_f)`.
    pub fn epsilon_at(&self, t: u64) -> Result<f64> {
        self.check_time(t)?;
        Ok(anneal(self.eps_i, self.eps_f, t, self.t_f))
    }

    /// Neighbourhood width at iteration `t`, same geometric law as the
    /// learning rate.
    pub fn sigma_at(&self, t: u64) -> Result<f64> {
        self.check_time(t)?;
        Ok(anneal(self.sigma_i, self.sigma_f, t, self.t_f))
    }
}

fn anneal(initial: f64, last: f64, t: u64, t_f: u64) -> f64 {
    if t == 0 {
        return initial;
    }
    if t == t_f {
        return last;
    }
    initial * (last / initial).powf(t as f64 / t_f as f64)
}

/// Afferent response of a whole map to one input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVector {
    pub values: Vec<f64>,
    pub bmu_index: usize,
    pub bmu_value: f64,
}

impl ActivationVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SomMap {
    params: SomParams,
    weights: Vec<f64>,
}

impl SomMap {
    /// Fresh map with weights drawn uniformly from `[0, 1)` by a generator
    /// seeded from `params.seed`.
    pub fn new(params: SomParams) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let weights = (0..params.neurons() * params.input_dim)
            .map(|_| rng.random::<f64>())
            .collect();
        Ok(Self { params, weights })
    }

    /// Builds a map from explicit weights, `neurons × input_dim` row-major.
    pub fn from_weights(params: SomParams, weights: Vec<f64>) -> Result<Self> {
        params.validate()?;
        check_len(
            "map weights",
            params.neurons() * params.input_dim,
            weights.len(),
        )?;
        if let Some(bad) = weights.iter().position(|w| !w.is_finite()) {
            return Err(ResomError::param(format!("weight {bad} is not finite")));
        }
        Ok(Self { params, weights })
    }

    pub fn params(&self) -> &SomParams {
        &self.params
    }

    pub fn neurons(&self) -> usize {
        self.params.neurons()
    }

    pub fn input_dim(&self) -> usize {
        self.params.input_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, n: usize) -> &[f64] {
        let d = self.params.input_dim;
        &self.weights[n * d..(n + 1) * d]
    }

    /// Grid coordinate `(row, col)` of neuron `n`.
    pub fn position(&self, n: usize) -> (usize, usize) {
        (n / self.params.width, n % self.params.width)
    }

    fn check_input(&self, v: &[f64]) -> Result<()> {
        check_len("input vector", self.params.input_dim, v.len())
    }

    fn check_neuron(&self, n: usize) -> Result<()> {
        if n >= self.neurons() {
            return Err(ResomError::Index {
                context: "map neurons",
                index: n,
                len: self.neurons(),
            });
        }
        Ok(())
    }

    fn squared_distances(&self, v: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.params.input_dim)
            .map(|w| w.iter().zip(v).map(|(a, b)| (b - a) * (b - a)).sum())
            .collect()
    }

    /// Index of the neuron closest to `v` in L2 distance, and that distance.
    /// Ties go to the smallest index.
    pub fn bmu(&self, v: &[f64]) -> Result<(usize, f64)> {
        self.check_input(v)?;
        let (idx, d2) = argmin(&self.squared_distances(v));
        Ok((idx, d2.sqrt()))
    }

    /// Gaussian neighbourhood `exp(-|p_n - p_s|^2 / (2 sigma(t)^2))` on the grid.
    pub fn neighborhood(&self, t: u64, n: usize, s: usize) -> Result<f64> {
        self.check_neuron(n)?;
        self.check_neuron(s)?;
        let sigma = self.params.sigma_at(t)?;
        Ok(self.neighborhood_with(sigma, n, s))
    }

    fn neighborhood_with(&self, sigma: f64, n: usize, s: usize) -> f64 {
        let (rn, cn) = self.position(n);
        let (rs, cs) = self.position(s);
        let dr = rn as f64 - rs as f64;
        let dc = cn as f64 - cs as f64;
        (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp()
    }

    /// One Kohonen update at iteration `t` (`0 <= t < t_f`). Returns the BMU.
    pub fn train_step(&mut self, v: &[f64], t: u64) -> Result<usize> {
        self.check_input(v)?;
        if t >= self.params.t_f {
            return Err(ResomError::param(format!(
                "training step {t} outside 0..{}",
                self.params.t_f
            )));
        }
        let eps = self.params.epsilon_at(t)?;
        let sigma = self.params.sigma_at(t)?;
        let (s, _) = argmin(&self.squared_distances(v));
        let d = self.params.input_dim;
        for n in 0..self.neurons() {
            let rate = eps * self.neighborhood_with(sigma, n, s);
            for (w, x) in self.weights[n * d..(n + 1) * d].iter_mut().zip(v) {
                *w += rate * (x - *w);
            }
        }
        Ok(s)
    }

    /// Runs exactly `t_f` training steps. Samples are visited in a seeded
    /// shuffled order, reshuffled each time the whole set has been seen.
    pub fn train<S: AsRef<[f64]>>(&mut self, samples: &[S]) -> Result<()> {
        if samples.is_empty() {
            return Err(ResomError::input("cannot train a map on an empty dataset"));
        }
        for s in samples {
            self.check_input(s.as_ref())?;
        }
        let mut rng = shuffle_rng(self.params.seed);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut cursor = order.len();
        for t in 0..self.params.t_f {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            self.train_step(samples[order[cursor]].as_ref(), t)?;
            cursor += 1;
        }
        Ok(())
    }

    /// Afferent activation `exp(-|v - w_n| / alpha)` of every neuron.
    ///
    /// Values are floored at `f64::MIN_POSITIVE` so that they stay strictly
    /// positive even when the exponential underflows.
    pub fn activation(&self, v: &[f64]) -> Result<ActivationVector> {
        self.check_input(v)?;
        let d2 = self.squared_distances(v);
        let (bmu_index, _) = argmin(&d2);
        let alpha = self.params.alpha;
        let values: Vec<f64> = d2
            .iter()
            .map(|d| (-d.sqrt() / alpha).exp().max(f64::MIN_POSITIVE))
            .collect();
        let bmu_value = values[bmu_index];
        Ok(ActivationVector {
            values,
            bmu_index,
            bmu_value,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::with_capacity(20 + self.weights.len() * 8 + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(p.width as u32).to_le_bytes());
        out.extend_from_slice(&(p.height as u32).to_le_bytes());
        out.extend_from_slice(&(p.input_dim as u32).to_le_bytes());
        put_f64s(&mut out, &self.weights);
        put_f64s(&mut out, &[p.eps_i, p.eps_f, p.sigma_i, p.sigma_f]);
        out.extend_from_slice(&p.t_f.to_le_bytes());
        put_f64s(&mut out, &[p.alpha]);
        out.extend_from_slice(&p.seed.to_le_bytes());
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
                format!("unsupported RSOM version {version}"),
            ));
        }
        let width = r.u32_le("width")? as usize;
        let height = r.u32_le("height")? as usize;
        let input_dim = r.u32_le("input_dim")? as usize;
        let weights = r.f64_vec_le(width * height * input_dim, "weights")?;
        let params = SomParams {
            width,
            height,
            input_dim,
            eps_i: r.f64_le("eps_i")?,
            eps_f: r.f64_le("eps_f")?,
            sigma_i: r.f64_le("sigma_i")?,
            sigma_f: r.f64_le("sigma_f")?,
            t_f: r.u64_le("t_f")?,
            alpha: r.f64_le("alpha")?,
            seed: r.u64_le("seed")?,
        };
        r.finish("RSOM map")?;
        Self::from_weights(params, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Smallest value and its first index. NaN never wins.
pub(crate) fn argmin(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}
