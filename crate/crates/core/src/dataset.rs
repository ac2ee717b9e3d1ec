//! Modality datasets, class alignment, stratified splits and synthetic data.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, ResomError, Result};
use crate::io::{put_f64s, write_atomic, ByteReader};
use crate::model::ClassId;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const RMAT_MAGIC: &[u8; 4] = b"RMAT";
const RMAT_VERSION: u32 = 1;
const DATASET_MANIFEST: &str = "dataset.json";
const DATASET_FORMAT: &str = "resom-dataset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Idx,
    Csv,
    Rmat,
    Synthetic,
}

/// `N` vectors of dimension `d`, every component in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityDataset {
    name: String,
    dim: usize,
    data: Vec<f64>,
    labels: Option<Vec<ClassId>>,
    source: SourceFormat,
}

impl ModalityDataset {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        data: Vec<f64>,
        labels: Option<Vec<ClassId>>,
        source: SourceFormat,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(ResomError::param("modality dimension must be >= 1"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(ResomError::input(format!(
                "{} values do not divide into vectors of dimension {dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !(0.0..=1.0).contains(x)) {
            return Err(ResomError::input(format!(
                "component {} of sample {} is {} (outside [0, 1])",
                i % dim,
                i / dim,
                data[i]
            )));
        }
        if let Some(l) = &labels {
            check_len("labels", data.len() / dim, l.len())?;
        }
        Ok(Self {
            name: name.into(),
            dim,
            data,
            labels,
            source,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn source(&self) -> SourceFormat {
        self.source
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Option<&[ClassId]> {
        self.labels.as_deref()
    }

    /// Rows `indices`, in order, as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.len() {
                return Err(ResomError::Index {
                    context: "modality rows",
                    index: i,
                    len: self.len(),
                });
            }
            data.extend_from_slice(self.row(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(self.name.clone(), self.dim, data, labels, self.source)
    }

    /// Concatenates the rows of `other` after the rows of `self`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        check_len("concatenated dimension", self.dim, other.dim)?;
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            (None, None) => None,
            _ => {
                return Err(ResomError::input(
                    "cannot concatenate labeled and unlabeled data",
                ))
            }
        };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::new(self.name.clone(), self.dim, data, labels, self.source)
    }

    pub fn to_rmat_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 8);
        out.extend_from_slice(RMAT_MAGIC);
        out.extend_from_slice(&RMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        put_f64s(&mut out, &self.data);
        if let Some(labels) = &self.labels {
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out
    }

    pub fn from_rmat_bytes(name: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(RMAT_MAGIC)?;
        let at = r.offset();
        let version = r.u32_le("version")?;
        if version != RMAT_VERSION {
            return Err(ResomError::format(
                at,
                format!("unsupported RMAT version {version}"),
            ));
        }
        let n = r.u32_le("row count")? as usize;
        let at = r.offset();
        let d = r.u32_le("dimension")? as usize;
        if d == 0 {
            return Err(ResomError::format(at, "dimension must be >= 1"));
        }
        let data = r.f64_vec_le(n * d, "matrix data")?;
        let labels = match r.remaining() {
            0 => None,
            rem if rem == 2 * n => Some(
                (0..n)
                    .map(|_| r.u16_le("label"))
                    .collect::<Result<Vec<_>>>()?,
            ),
            rem => {
                return Err(ResomError::format(
                    r.offset(),
                    format!("{rem} trailing bytes do not form a {n}-entry label block"),
                ))
            }
        };
        Self::new(name, d, data, labels, SourceFormat::Rmat)
    }

    pub fn save_rmat(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_rmat_bytes())
    }

    pub fn load_rmat(path: &Path) -> Result<Self> {
        Self::from_rmat_bytes(file_stem(path), &fs::read(path)?)
    }
}

fn file_stem(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

/// Reads a file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an IDX image file and its label file (either may be gzipped).
/// Pixels are scaled by `1/255` and images flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ModalityDataset> {
    parse_idx(
        file_stem(images_path),
        &read_maybe_gz(images_path)?,
        &read_maybe_gz(labels_path)?,
    )
}

pub fn parse_idx(name: impl Into<String>, images: &[u8], labels: &[u8]) -> Result<ModalityDataset> {
    let mut r = ByteReader::new(images);
    let magic = r.u32_be("image magic")?;
    if magic != IDX_IMAGES {
        return Err(ResomError::format(
            0,
            format!("bad IDX image magic {magic:#010x}"),
        ));
    }
    let count = r.u32_be("image count")? as usize;
    let rows = r.u32_be("image rows")? as usize;
    let cols = r.u32_be("image cols")? as usize;
    let dim = rows * cols;
    if dim == 0 {
        return Err(ResomError::format(8, "image dimensions must be nonzero"));
    }
    let pixels = r.take(count * dim, "pixel data")?;
    r.finish("pixel data")?;

    let mut lr = ByteReader::new(labels);
    let magic = lr.u32_be("label magic")?;
    if magic != IDX_LABELS {
        return Err(ResomError::format(
            0,
            format!("bad IDX label magic {magic:#010x}"),
        ));
    }
    let n_labels = lr.u32_be("label count")? as usize;
    if n_labels != count {
        return Err(ResomError::format(
            4,
            format!("label count {n_labels} does not match image count {count}"),
        ));
    }
    let label_bytes = lr.take(count, "label data")?;
    lr.finish("label data")?;

    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels = label_bytes.iter().map(|&l| l as ClassId).collect();
    ModalityDataset::new(name, dim, data, Some(labels), SourceFormat::Idx)
}

/// One sample per line, comma-separated reals with an optional trailing
/// integer label. Every column is min-max normalized to `[0, 1]`; a
/// constant column becomes `0`.
pub fn load_matrix_csv(path: &Path, has_labels: bool) -> Result<ModalityDataset> {
    parse_matrix_csv(file_stem(path), &fs::read_to_string(path)?, has_labels)
}

pub fn parse_matrix_csv(
    name: impl Into<String>,
    text: &str,
    has_labels: bool,
) -> Result<ModalityDataset> {
    let mut width = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let expected = *width.get_or_insert(fields.len());
        if fields.len() != expected {
            return Err(ResomError::FormatLine {
                line: line_no,
                message: format!("expected {expected} fields, found {}", fields.len()),
            });
        }
        let (values, label) = if has_labels {
            let (last, rest) = fields.split_last().unwrap();
            let label = last
                .parse::<ClassId>()
                .map_err(|_| ResomError::FormatLine {
                    line: line_no,
                    message: format!("label {last:?} is not a class id"),
                })?;
            (rest, Some(label))
        } else {
            (fields.as_slice(), None)
        };
        if values.is_empty() {
            return Err(ResomError::FormatLine {
                line: line_no,
                message: "no feature columns".into(),
            });
        }
        for f in values {
            let x = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| ResomError::FormatLine {
                    line: line_no,
                    message: format!("{f:?} is not a finite number"),
                })?;
            data.push(x);
        }
        labels.extend(label);
    }
    let Some(width) = width else {
        return Err(ResomError::input("CSV file has no samples"));
    };
    let dim = width - has_labels as usize;
    min_max_normalize(&mut data, dim);
    ModalityDataset::new(
        name,
        dim,
        data,
        has_labels.then_some(labels),
        SourceFormat::Csv,
    )
}

fn min_max_normalize(data: &mut [f64], dim: usize) {
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for row in data.chunks_exact(dim) {
        for (c, x) in row.iter().enumerate() {
            lo[c] = lo[c].min(*x);
            hi[c] = hi[c].max(*x);
        }
    }
    for row in data.chunks_exact_mut(dim) {
        for (c, x) in row.iter_mut().enumerate() {
            let range = hi[c] - lo[c];
            *x = if range > 0.0 {
                ((*x - lo[c]) / range).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
}

/// Row indices of a multimodal dataset. `labeling` is a subset of `train`;
/// `test` is disjoint from both.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub labeling: Vec<usize>,
    pub test: Vec<usize>,
}

/// `k` modalities whose rows are tied into synchronized samples: row `i`
/// presents `modalities[j].row(rows[i][j])` to map `j`, all of class
/// `classes[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    modalities: Vec<ModalityDataset>,
    rows: Vec<Vec<usize>>,
    classes: Vec<ClassId>,
    splits: Splits,
}

impl MultimodalDataset {
    /// Every row starts out in the training split.
    pub fn new(
        modalities: Vec<ModalityDataset>,
        rows: Vec<Vec<usize>>,
        classes: Vec<ClassId>,
    ) -> Result<Self> {
        if modalities.is_empty() {
            return Err(ResomError::input("a dataset needs at least one modality"));
        }
        check_len("row classes", rows.len(), classes.len())?;
        for (i, (row, &class)) in rows.iter().zip(&classes).enumerate() {
            check_len("modalities in aligned row", modalities.len(), row.len())?;
            for (m, &idx) in modalities.iter().zip(row) {
                if idx >= m.len() {
                    return Err(ResomError::Index {
                        context: "aligned modality sample",
                        index: idx,
                        len: m.len(),
                    });
                }
                if let Some(l) = m.labels() {
                    if l[idx] != class {
                        return Err(ResomError::input(format!(
                            "row {i}: sample {idx} of {} has class {} instead of {class}",
                            m.name(),
                            l[idx]
                        )));
                    }
                }
            }
        }
        let splits = Splits {
            train: (0..rows.len()).collect(),
            ..Splits::default()
        };
        Ok(Self {
            modalities,
            rows,
            classes,
            splits,
        })
    }

    /// One labeled modality used as-is, row `i` being sample `i`.
    pub fn from_single(m: ModalityDataset) -> Result<Self> {
        let classes = m
            .labels()
            .ok_or_else(|| ResomError::input(format!("modality {} has no labels", m.name())))?
            .to_vec();
        let rows = (0..m.len()).map(|i| vec![i]).collect();
        Self::new(vec![m], rows, classes)
    }

    pub fn k(&self) -> usize {
        self.modalities.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn modalities(&self) -> &[ModalityDataset] {
        &self.modalities
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.iter().max().map_or(0, |c| *c as usize + 1)
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn set_splits(&mut self, splits: Splits) -> Result<()> {
        let n = self.len();
        let mut role = vec![0u8; n];
        for (set, bit) in [
            (&splits.train, 1u8),
            (&splits.labeling, 2),
            (&splits.test, 4),
        ] {
            for &i in set {
                if i >= n {
                    return Err(ResomError::Index {
                        context: "split",
                        index: i,
                        len: n,
                    });
                }
                if role[i] & bit != 0 {
                    return Err(ResomError::input(format!("row {i} repeated in a split")));
                }
                role[i] |= bit;
            }
        }
        if let Some(i) = role.iter().position(|r| *r & 4 != 0 && *r & 3 != 0) {
            return Err(ResomError::input(format!(
                "row {i} is in the test split and another split"
            )));
        }
        if let Some(i) = role.iter().position(|r| *r & 2 != 0 && *r & 1 == 0) {
            return Err(ResomError::input(format!(
                "labeling row {i} is not a training row"
            )));
        }
        self.splits = splits;
        Ok(())
    }

    /// Input vectors of row `i`, one per modality.
    pub fn sample(&self, i: usize) -> Vec<&[f64]> {
        self.rows[i]
            .iter()
            .zip(&self.modalities)
            .map(|(&idx, m)| m.row(idx))
            .collect()
    }

    pub fn samples(&self, indices: &[usize]) -> Vec<Vec<&[f64]>> {
        indices.iter().map(|&i| self.sample(i)).collect()
    }

    pub fn classes_of(&self, indices: &[usize]) -> Vec<ClassId> {
        indices.iter().map(|&i| self.classes[i]).collect()
    }

    /// Modality `j` vectors of the given rows.
    pub fn modality_rows(&self, j: usize, indices: &[usize]) -> Vec<&[f64]> {
        indices
            .iter()
            .map(|&i| self.modalities[j].row(self.rows[i][j]))
            .collect()
    }

    /// Dataset restricted to modalities `which` (in that order), splits kept.
    pub fn select_modalities(&self, which: &[usize]) -> Result<Self> {
        for &j in which {
            if j >= self.k() {
                return Err(ResomError::Index {
                    context: "modality",
                    index: j,
                    len: self.k(),
                });
            }
        }
        let mut out = Self::new(
            which.iter().map(|&j| self.modalities[j].clone()).collect(),
            self.rows
                .iter()
                .map(|r| which.iter().map(|&j| r[j]).collect())
                .collect(),
            self.classes.clone(),
        )?;
        out.splits = self.splits.clone();
        Ok(out)
    }

    /// Copy containing only `indices` (in order) with fresh splits; modality
    /// storage is compacted to the referenced samples.
    pub fn subset_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut modalities = Vec::with_capacity(self.k());
        let mut rows = vec![Vec::with_capacity(self.k()); indices.len()];
        for (j, m) in self.modalities.iter().enumerate() {
            let mut remap = BTreeMap::new();
            let mut keep = Vec::new();
            for (r, &i) in indices.iter().enumerate() {
                let src = self.rows[i][j];
                let next = remap.len();
                let new = *remap.entry(src).or_insert_with(|| {
                    keep.push(src);
                    next
                });
                rows[r].push(new);
            }
            modalities.push(m.subset(&keep)?);
        }
        Self::new(modalities, rows, self.classes_of(indices))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (j, m) in self.modalities.iter().enumerate() {
            let file = format!("modality_{j}.rmat");
            m.save_rmat(&dir.join(&file))?;
            entries.push(ModalityEntry {
                name: m.name().to_string(),
                file,
                source: m.source(),
            });
        }
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: 1,
            modalities: entries,
            rows: self.rows.clone(),
            classes: self.classes.clone(),
            splits: self.splits.clone(),
        };
        write_atomic(&dir.join(DATASET_MANIFEST), &serde_json::to_vec(&manifest)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DATASET_MANIFEST);
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&path)?)?;
        if manifest.format != DATASET_FORMAT {
            return Err(ResomError::input(format!(
                "{} is not a dataset manifest",
                path.display()
            )));
        }
        let mut modalities = Vec::new();
        for e in &manifest.modalities {
            let m = ModalityDataset::load_rmat(&dir.join(&e.file))?;
            modalities.push(ModalityDataset {
                name: e.name.clone(),
                source: e.source,
                ..m
            });
        }
        let mut out = Self::new(modalities, manifest.rows, manifest.classes)?;
        out.set_splits(manifest.splits)?;
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModalityEntry {
    name: String,
    file: String,
    source: SourceFormat,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    version: u32,
    modalities: Vec<ModalityEntry>,
    rows: Vec<Vec<usize>>,
    classes: Vec<ClassId>,
    splits: Splits,
}

/// Parameters of a synthetic class-aligned multimodal dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    /// Dimension of each modality.
    pub dims: Vec<usize>,
    pub samples_per_class: usize,
    /// Noise standard deviation, either one value shared by every modality
    /// or one per modality.
    pub noise_sigma: Vec<f64>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn noise_for(&self, j: usize) -> f64 {
        if self.noise_sigma.len() == 1 {
            self.noise_sigma[0]
        } else {
            self.noise_sigma[j]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > ClassId::MAX as usize {
            return Err(ResomError::param(format!(
                "need at least 2 classes (got {})",
                self.classes
            )));
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(ResomError::param("every modality needs a dimension >= 1"));
        }
        if self.noise_sigma.len() != 1 && self.noise_sigma.len() != self.dims.len() {
            return Err(ResomError::param(format!(
                "noise_sigma needs 1 or {} entries (got {})",
                self.dims.len(),
                self.noise_sigma.len()
            )));
        }
        if let Some(s) = self
            .noise_sigma
            .iter()
            .find(|s| !(s.is_finite() && **s >= 0.0))
        {
            return Err(ResomError::param(format!(
                "noise_sigma must be finite and >= 0 (got {s})"
            )));
        }
        Ok(())
    }
}

/// Per class and modality a centroid drawn uniformly in `[0.2, 0.8]^d`;
/// samples are the centroid plus Gaussian noise, clamped to `[0, 1]`.
/// Row `i` holds sample `i` of every modality.
pub fn synth_multimodal(spec: &SynthSpec) -> Result<MultimodalDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes * spec.samples_per_class;
    let classes: Vec<ClassId> = (0..n).map(|i| (i % spec.classes) as ClassId).collect();
    let mut modalities = Vec::with_capacity(spec.dims.len());
    for (j, &d) in spec.dims.iter().enumerate() {
        let centroids: Vec<f64> = (0..spec.classes * d)
            .map(|_| rng.random_range(0.2..=0.8))
            .collect();
        let sigma = spec.noise_for(j);
        let noise = Normal::new(0.0, sigma).map_err(|e| ResomError::param(e.to_string()))?;
        let mut data = Vec::with_capacity(n * d);
        for &c in &classes {
            let centroid = &centroids[c as usize * d..(c as usize + 1) * d];
            for &m in centroid {
                let x = if sigma > 0.0 {
                    m + noise.sample(&mut rng)
                } else {
                    m
                };
                data.push(x.clamp(0.0, 1.0));
            }
        }
        modalities.push(ModalityDataset::new(
            format!("synth_{j}"),
            d,
            data,
            Some(classes.clone()),
            SourceFormat::Synthetic,
        )?);
    }
    let rows = (0..n).map(|i| vec![i; spec.dims.len()]).collect();
    MultimodalDataset::new(modalities, rows, classes)
}

/// Ties labeled modalities into `target_rows` class-consistent rows. Row
/// classes follow the class distribution of the first modality. Within a
/// class each modality contributes distinct samples while it has enough of
/// them and is oversampled with replacement beyond that.
pub fn align_by_class(
    modalities: Vec<ModalityDataset>,
    target_rows: usize,
    seed: u64,
) -> Result<MultimodalDataset> {
    if modalities.is_empty() {
        return Err(ResomError::input("no modalities to align"));
    }
    let mut pools: Vec<BTreeMap<ClassId, Vec<usize>>> = Vec::with_capacity(modalities.len());
    for m in &modalities {
        let labels = m
            .labels()
            .ok_or_else(|| ResomError::input(format!("modality {} has no labels", m.name())))?;
        if labels.is_empty() {
            return Err(ResomError::input(format!("modality {} is empty", m.name())));
        }
        let mut pool: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            pool.entry(l).or_default().push(i);
        }
        pools.push(pool);
    }
    let vocabulary: Vec<ClassId> = pools
        .iter()
        .flat_map(|p| p.keys().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    for &c in &vocabulary {
        for (m, p) in modalities.iter().zip(&pools) {
            if !p.contains_key(&c) {
                return Err(ResomError::input(format!(
                    "class {c} is missing from modality {}",
                    m.name()
                )));
            }
        }
    }

    let weights: Vec<usize> = vocabulary.iter().map(|c| pools[0][c].len()).collect();
    let per_class = apportion(&weights, target_rows);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<usize>> = Vec::with_capacity(target_rows);
    let mut classes = Vec::with_capacity(target_rows);
    for (&c, &count) in vocabulary.iter().zip(&per_class) {
        let picks: Vec<Vec<usize>> = pools
            .iter()
            .map(|p| draw(&p[&c], count, &mut rng))
            .collect();
        for r in 0..count {
            rows.push(picks.iter().map(|p| p[r]).collect());
            classes.push(c);
        }
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng);
    let rows = order.iter().map(|&i| rows[i].clone()).collect();
    let classes = order.iter().map(|&i| classes[i]).collect();
    MultimodalDataset::new(modalities, rows, classes)
}

/// `count` indices from `pool`: a shuffled prefix when the pool is large
/// enough, otherwise the whole pool plus draws with replacement.
fn draw(pool: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(rng);
    if count <= shuffled.len() {
        shuffled.truncate(count);
        return shuffled;
    }
    let extra: Vec<usize> = (shuffled.len()..count)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect();
    shuffled.extend(extra);
    shuffled
}

/// Splits `total` proportionally to `weights` by largest remainder; ties in
/// the remainder go to the earlier entry.
fn apportion(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|w| w * total / sum).collect();
    let mut rest: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (w * total % sum, i))
        .collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = total - out.iter().sum::<usize>();
    for &(_, i) in rest.iter().take(missing) {
        out[i] += 1;
    }
    out
}

fn by_class(classes: &[ClassId], indices: &[usize]) -> BTreeMap<ClassId, Vec<usize>> {
    let mut out: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        out.entry(classes[i]).or_default().push(i);
    }
    out
}

/// Stratified sample of `round(fraction * |indices|)` rows; when
/// `every_class` is set each class contributes at least one row.
fn stratified_pick(
    classes: &[ClassId],
    indices: &[usize],
    fraction: f64,
    every_class: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let groups = by_class(classes, indices);
    let total = (fraction * indices.len() as f64).round() as usize;
    if every_class && total < groups.len() {
        return Err(ResomError::param(format!(
            "fraction {fraction} of {} rows selects {total}, fewer than the {} classes",
            indices.len(),
            groups.len()
        )));
    }
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let mut quota = apportion(&sizes, total);
    if every_class {
        while let Some(empty) = quota.iter().position(|q| *q == 0) {
            let donor = (0..quota.len())
                .max_by_key(|&i| (quota[i], std::cmp::Reverse(i)))
                .unwrap();
            quota[donor] -= 1;
            quota[empty] += 1;
        }
    }
    let mut picked = Vec::with_capacity(total);
    for (members, q) in groups.values().zip(quota) {
        let mut m = members.clone();
        m.shuffle(rng);
        picked.extend_from_slice(&m[..q]);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Seeded stratified split: `test_fraction` of all rows form the test set,
/// the rest the training set, and `label_fraction` of the training rows
/// (every class represented) form the labeling set.
pub fn split(
    mut dataset: MultimodalDataset,
    label_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<MultimodalDataset> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(ResomError::param(format!(
            "test_fraction must lie in [0, 1) (got {test_fraction})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..dataset.len()).collect();
    let test = stratified_pick(&dataset.classes, &all, test_fraction, false, &mut rng)?;
    let mut is_test = vec![false; dataset.len()];
    test.iter().for_each(|&i| is_test[i] = true);
    let train: Vec<usize> = all.into_iter().filter(|&i| !is_test[i]).collect();
    dataset = split_fixed(dataset, train, test, label_fraction, &mut rng)?;
    Ok(dataset)
}

/// Keeps a caller-provided train/test partition and draws the labeling set
/// from `train`.
pub fn split_with_test(
    dataset: MultimodalDataset,
    train: Vec<usize>,
    test: Vec<usize>,
    label_fraction: f64,
    seed: u64,
) -> Result<MultimodalDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    split_fixed(dataset, train, test, label_fraction, &mut rng)
}

fn split_fixed(
    mut dataset: MultimodalDataset,
    train: Vec<usize>,
    test: Vec<usize>,
    label_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MultimodalDataset> {
    if !(label_fraction > 0.0 && label_fraction < 1.0) {
        return Err(ResomError::param(format!(
            "label_fraction must lie in (0, 1) (got {label_fraction})"
        )));
    }
    if train.is_empty() {
        return Err(ResomError::input("training split is empty"));
    }
    let labeling = stratified_pick(&dataset.classes, &train, label_fraction, true, rng)?;
    dataset.set_splits(Splits {
        train,
        labeling,
        test,
    })?;
    Ok(dataset)
}
