//! Experiment configuration, read from JSON.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resom::dataset::{
    align_by_class, load_idx, load_matrix_csv, split, split_with_test, synth_multimodal,
    ModalityDataset, MultimodalDataset, SynthSpec,
};
use resom::{LabelingCoefficients, ResomError, Result, SomParams};
use serde::{Deserialize, Serialize};

fn default_label_fraction() -> f64 {
    0.08
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_mu() -> f64 {
    1.0
}

fn default_keep() -> Vec<f64> {
    vec![1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives every random choice; there is no wall-clock seeding.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    /// One entry per modality.
    pub maps: Vec<MapConfig>,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default)]
    pub c1: Option<Vec<f64>>,
    #[serde(default)]
    pub c2: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_label_fraction")]
    pub label_fraction: f64,
    /// Share of rows held out for testing when the dataset has no
    /// predefined test set.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_keep")]
    pub keep_fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub eps_i: Option<f64>,
    #[serde(default)]
    pub eps_f: Option<f64>,
    #[serde(default)]
    pub sigma_i: Option<f64>,
    #[serde(default)]
    pub sigma_f: Option<f64>,
    /// Training iterations; defaults to 10 passes over the training rows.
    #[serde(default)]
    pub t_f: Option<u64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Defaults to the experiment seed plus the map index.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Tile shape `[rows, cols]` for weight mosaics.
    #[serde(default)]
    pub tile: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Class-aligned synthetic modalities.
    Synth {
        classes: usize,
        dims: Vec<usize>,
        samples_per_class: usize,
        noise_sigma: Vec<f64>,
    },
    /// MNIST IDX files (optionally gzipped) in `dir`; a seeded subset of
    /// `train_samples` training images and the first `test_samples` test
    /// images.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_samples: Option<usize>,
        #[serde(default)]
        test_samples: Option<usize>,
    },
    /// Labeled modality files aligned by class into `rows` rows.
    Files {
        modalities: Vec<ModalityFile>,
        rows: usize,
    },
    /// A dataset bundle written by `synth` or `pipeline`.
    Bundle { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModalityFile {
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf },
    Rmat { path: PathBuf },
}

fn field_err(field: &str, e: ResomError) -> ResomError {
    ResomError::Param(format!("{field}: {e}"))
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Finds an MNIST file in `dir`, accepting `.gz` and the `x-idx3-ubyte`
/// / `x.idx3-ubyte` spellings.
pub fn mnist_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    let dotted = stem.replacen("-idx", ".idx", 1);
    for name in [
        stem.to_string(),
        format!("{stem}.gz"),
        dotted.clone(),
        format!("{dotted}.gz"),
    ] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(ResomError::Input(format!(
        "{stem} not found in {}",
        dir.display()
    )))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path)
            .map_err(|e| ResomError::Input(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_slice(&text)
            .map_err(|e| ResomError::Param(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.maps.is_empty() {
            return Err(ResomError::Param(
                "maps: at least one map is required".into(),
            ));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction < 1.0) {
            return Err(ResomError::Param(format!(
                "label_fraction: must lie in (0, 1), got {}",
                self.label_fraction
            )));
        }
        if !(self.test_fraction >= 0.0 && self.test_fraction < 1.0) {
            return Err(ResomError::Param(format!(
                "test_fraction: must lie in [0, 1), got {}",
                self.test_fraction
            )));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(ResomError::Param(format!(
                "mu: must be > 0, got {}",
                self.mu
            )));
        }
        for (i, m) in self.maps.iter().enumerate() {
            if m.width == 0 || m.height == 0 {
                return Err(ResomError::Param(format!(
                    "maps[{i}]: width and height must be >= 1 (got {}x{})",
                    m.width, m.height
                )));
            }
        }
        if let Some(f) = self
            .keep_fractions
            .iter()
            .find(|f| !(**f > 0.0 && **f <= 1.0))
        {
            return Err(ResomError::Param(format!(
                "keep_fractions: {f} outside (0, 1]"
            )));
        }
        Ok(())
    }

    /// Loads or generates the dataset and assigns train / labeling / test
    /// rows.
    pub fn dataset(&self) -> Result<MultimodalDataset> {
        self.validate()?;
        let data = match &self.dataset {
            DatasetSpec::Synth {
                classes,
                dims,
                samples_per_class,
                noise_sigma,
            } => {
                let spec = SynthSpec {
                    classes: *classes,
                    dims: dims.clone(),
                    samples_per_class: *samples_per_class,
                    noise_sigma: noise_sigma.clone(),
                    seed: self.seed,
                };
                let d = synth_multimodal(&spec).map_err(|e| field_err("dataset", e))?;
                split(d, self.label_fraction, self.test_fraction, self.seed)?
            }
            DatasetSpec::Mnist {
                dir,
                train_samples,
                test_samples,
            } => {
                let f = |i: usize| mnist_file(dir, MNIST_FILES[i]);
                let train = load_idx(&f(0)?, &f(1)?)?;
                let test = load_idx(&f(2)?, &f(3)?)?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let n_train = train_samples.unwrap_or(train.len()).min(train.len());
                let mut pick: Vec<usize> = sample(&mut rng, train.len(), n_train).into_vec();
                pick.sort_unstable();
                let train = train.subset(&pick)?;
                let n_test = test_samples.unwrap_or(test.len()).min(test.len());
                let test = test.subset(&(0..n_test).collect::<Vec<_>>())?;
                let all = train.concat(&test)?;
                let d = MultimodalDataset::from_single(all)?;
                split_with_test(
                    d,
                    (0..n_train).collect(),
                    (n_train..n_train + n_test).collect(),
                    self.label_fraction,
                    self.seed,
                )?
            }
            DatasetSpec::Files { modalities, rows } => {
                let loaded = modalities
                    .iter()
                    .map(|m| match m {
                        ModalityFile::Idx { images, labels } => load_idx(images, labels),
                        ModalityFile::Csv { path } => load_matrix_csv(path, true),
                        ModalityFile::Rmat { path } => ModalityDataset::load_rmat(path),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let d = align_by_class(loaded, *rows, self.seed)?;
                split(d, self.label_fraction, self.test_fraction, self.seed)?
            }
            DatasetSpec::Bundle { path } => MultimodalDataset::load(path)?,
        };
        if data.k() != self.maps.len() {
            return Err(ResomError::Param(format!(
                "maps: {} entries for a dataset with {} modalities",
                self.maps.len(),
                data.k()
            )));
        }
        Ok(data)
    }

    pub fn som_params(&self, data: &MultimodalDataset) -> Result<Vec<SomParams>> {
        let train = data.splits().train.len() as u64;
        self.maps
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let base = SomParams::new(m.width, m.height, data.modalities()[j].dim());
                let p = SomParams {
                    eps_i: m.eps_i.unwrap_or(base.eps_i),
                    eps_f: m.eps_f.unwrap_or(base.eps_f),
                    sigma_i: m.sigma_i.unwrap_or(base.sigma_i),
                    sigma_f: m.sigma_f.unwrap_or(base.sigma_f),
                    t_f: m.t_f.unwrap_or(10 * train.max(1)),
                    alpha: m.alpha.unwrap_or(base.alpha),
                    seed: m.seed.unwrap_or(self.seed.wrapping_add(j as u64)),
                    ..base
                };
                p.validate()
                    .map_err(|e| field_err(&format!("maps[{j}]"), e))?;
                Ok(p)
            })
            .collect()
    }

    pub fn coefficients(&self) -> Result<LabelingCoefficients> {
        let k = self.maps.len();
        let mut c = LabelingCoefficients::unimodal(k);
        if let Some(c1) = &self.c1 {
            c.c1 = c1.clone();
        }
        if let Some(c2) = &self.c2 {
            c.c2 = c2.clone();
        }
        c.validate(k).map_err(|e| field_err("c1/c2", e))?;
        Ok(c)
    }
}
