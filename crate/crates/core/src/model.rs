//! Reentrant SOM: `k` modality maps tied together by one Hebbian lateral
//! matrix per unordered pair of maps.
//!
//! Neurons are labeled from a small annotated set after unsupervised
//! training. The labeling activation of a neuron mixes its own afferent
//! response (weight `c1[j]`) with the lateral drive from every other map
//! (weight `c2[l][j]`). At inference time each neuron scores its afferent
//! activation times the lateral drive from every other map, and the globally
//! strongest neuron across all maps names the class.

use std::path::{Path, PathBuf};
use std::thread;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataset::MultimodalDataset;
use crate::error::{check_len, ResomError, Result};
use crate::hebbian::{LateralMatrix, SparsityStats};
use crate::io::write_atomic;
use crate::som::{ActivationVector, SomMap, SomParams};

pub type ClassId = u16;

/// Relative weight of afferent (`c1[j]`) and lateral (`c2[l][j]`, from map
/// `l` into map `j`) activity when labeling neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingCoefficients {
    pub c1: Vec<f64>,
    pub c2: Vec<Vec<f64>>,
}

impl LabelingCoefficients {
    /// `c1 = 1`, `c2 = 0`: every map labels from its own activations only.
    pub fn unimodal(k: usize) -> Self {
        Self {
            c1: vec![1.0; k],
            c2: vec![vec![0.0; k]; k],
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        check_len("c1 coefficients", k, self.c1.len())?;
        check_len("c2 coefficient rows", k, self.c2.len())?;
        for row in &self.c2 {
            check_len("c2 coefficient columns", k, row.len())?;
        }
        let all = self.c1.iter().chain(self.c2.iter().flatten());
        if let Some(bad) = all.into_iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(ResomError::param(format!(
                "labeling coefficients must be finite and >= 0 (got {bad})"
            )));
        }
        Ok(())
    }
}

/// Outcome of classifying one multimodal sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: ClassId,
    pub map: usize,
    pub neuron: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub truth: ClassId,
    /// `None` when the winning neuron never received a label.
    pub predicted: Option<ClassId>,
    pub map: usize,
    pub neuron: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub accuracy: f64,
    /// `confusion[truth][predicted]`. Samples whose winner is unlabeled are
    /// not counted here, see `unlabeled`.
    pub confusion: Vec<Vec<u64>>,
    pub unlabeled: u64,
    pub predictions: Vec<SampleOutcome>,
}

impl EvaluationReport {
    pub fn from_outcomes(classes: usize, predictions: Vec<SampleOutcome>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(ResomError::input("cannot evaluate on an empty test set"));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        let mut correct = 0usize;
        let mut unlabeled = 0u64;
        for p in &predictions {
            let truth = p.truth as usize;
            if truth >= classes {
                return Err(ResomError::input(format!(
                    "test class {truth} outside the model's {classes} classes"
                )));
            }
            match p.predicted {
                Some(c) => {
                    confusion[truth][c as usize] += 1;
                    if c == p.truth {
                        correct += 1;
                    }
                }
                None => unlabeled += 1,
            }
        }
        Ok(Self {
            accuracy: correct as f64 / predictions.len() as f64,
            confusion,
            unlabeled,
            predictions,
        })
    }

    /// Confusion matrix as CSV, one row per true class.
    pub fn confusion_csv(&self) -> String {
        let c = self.confusion.len();
        let mut out = String::from("truth");
        for j in 0..c {
            out.push_str(&format!(",pred_{j}"));
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ResomModel {
    maps: Vec<SomMap>,
    /// One matrix per pair `l < j`, rows indexed by map `l`, in the order
    /// (0,1), (0,2), .., (0,k-1), (1,2), ..
    laterals: Vec<LateralMatrix>,
    labels: Vec<Vec<Option<ClassId>>>,
    /// `probabilities[j][s][class]` from the last labeling pass.
    probabilities: Vec<Vec<Vec<f64>>>,
    classes: usize,
    coeffs: LabelingCoefficients,
}

/// Number of lateral matrices a `k`-map model carries: `k (k - 1) / 2`.
pub fn lateral_count(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

impl ResomModel {
    /// Wires `maps` together with zeroed lateral matrices, one per pair.
    pub fn build(maps: Vec<SomMap>, mu: f64, coeffs: LabelingCoefficients) -> Result<Self> {
        if maps.is_empty() {
            return Err(ResomError::param("a model needs at least one map"));
        }
        for l in 0..maps.len() {
            for j in l + 1..maps.len() {
                if maps[l] == maps[j] {
                    return Err(ResomError::param(format!(
                        "maps {l} and {j} are duplicates"
                    )));
                }
            }
        }
        coeffs.validate(maps.len())?;
        let mut laterals = Vec::with_capacity(lateral_count(maps.len()));
        for l in 0..maps.len() {
            for j in l + 1..maps.len() {
                laterals.push(LateralMatrix::for_maps(&maps[l], &maps[j], mu)?);
            }
        }
        let labels = maps.iter().map(|m| vec![None; m.neurons()]).collect();
        Ok(Self {
            maps,
            laterals,
            labels,
            probabilities: Vec::new(),
            classes: 0,
            coeffs,
        })
    }

    pub fn k(&self) -> usize {
        self.maps.len()
    }

    pub fn maps(&self) -> &[SomMap] {
        &self.maps
    }

    pub fn map(&self, j: usize) -> &SomMap {
        &self.maps[j]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn coefficients(&self) -> &LabelingCoefficients {
        &self.coeffs
    }

    pub fn set_coefficients(&mut self, coeffs: LabelingCoefficients) -> Result<()> {
        coeffs.validate(self.k())?;
        self.coeffs = coeffs;
        Ok(())
    }

    pub fn labels(&self) -> &[Vec<Option<ClassId>>] {
        &self.labels
    }

    pub fn label_probabilities(&self) -> &[Vec<Vec<f64>>] {
        &self.probabilities
    }

    /// Overrides neuron labels, e.g. when restoring a bundle.
    pub fn set_labels(&mut self, classes: usize, labels: Vec<Vec<Option<ClassId>>>) -> Result<()> {
        check_len("label maps", self.k(), labels.len())?;
        for (map, l) in self.maps.iter().zip(&labels) {
            check_len("neuron labels", map.neurons(), l.len())?;
            if let Some(c) = l.iter().flatten().find(|c| **c as usize >= classes) {
                return Err(ResomError::param(format!(
                    "label {c} outside {classes} classes"
                )));
            }
        }
        self.classes = classes;
        self.labels = labels;
        Ok(())
    }

    pub fn laterals(&self) -> &[LateralMatrix] {
        &self.laterals
    }

    pub fn laterals_mut(&mut self) -> &mut [LateralMatrix] {
        &mut self.laterals
    }

    /// Pairs `(l, j)` with `l < j`, in storage order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let k = self.k();
        (0..k)
            .flat_map(|l| (l + 1..k).map(move |j| (l, j)))
            .collect()
    }

    fn pair_index(&self, l: usize, j: usize) -> usize {
        debug_assert!(l < j && j < self.k());
        let k = self.k();
        l * (2 * k - l - 1) / 2 + (j - l - 1)
    }

    pub fn lateral(&self, l: usize, j: usize) -> &LateralMatrix {
        &self.laterals[self.pair_index(l, j)]
    }

    pub fn replace_lateral(&mut self, l: usize, j: usize, m: LateralMatrix) -> Result<()> {
        check_len("replacement lateral rows", self.maps[l].neurons(), m.rows())?;
        check_len("replacement lateral cols", self.maps[j].neurons(), m.cols())?;
        let idx = self.pair_index(l, j);
        self.laterals[idx] = m;
        Ok(())
    }

    /// Lateral drive from map `l` into every neuron `s` of map `j`:
    /// `a^l · W^{l,j}_s`, reading the stored `(min, max)` matrix transposed
    /// when `l > j`.
    pub fn lateral_drive(&self, l: usize, j: usize, a_l: &[f64]) -> Result<Vec<f64>> {
        if l == j || l >= self.k() || j >= self.k() {
            return Err(ResomError::param(format!(
                "no lateral connection from {l} to {j}"
            )));
        }
        check_len("source activation", self.maps[l].neurons(), a_l.len())?;
        if l < j {
            // rows belong to l: drive[s] = sum_r a_l[r] W[r][s]
            let w = self.lateral(l, j);
            let mut drive = vec![0.0; w.cols()];
            for (r, a) in a_l.iter().enumerate() {
                for (d, x) in drive.iter_mut().zip(w.row(r)) {
                    *d += a * x;
                }
            }
            Ok(drive)
        } else {
            // rows belong to j: drive[s] = sum_c W[s][c] a_l[c]
            let w = self.lateral(j, l);
            Ok((0..w.rows())
                .map(|s| w.row(s).iter().zip(a_l).map(|(x, a)| x * a).sum())
                .collect())
        }
    }

    /// Afferent activations of every map for one synchronized sample.
    pub fn activations<V: AsRef<[f64]>>(&self, inputs: &[V]) -> Result<Vec<ActivationVector>> {
        check_len("modalities in sample", self.k(), inputs.len())?;
        self.maps
            .iter()
            .zip(inputs)
            .map(|(m, v)| m.activation(v.as_ref()))
            .collect()
    }

    fn check_activations(&self, acts: &[ActivationVector]) -> Result<()> {
        check_len("activation vectors", self.k(), acts.len())?;
        for (m, a) in self.maps.iter().zip(acts) {
            check_len("activation length", m.neurons(), a.len())?;
        }
        Ok(())
    }

    /// Labeling activation of every neuron of map `j`:
    /// `c1[j] a^j_s + sum_{l != j} c2[l][j] (a^l · W^{l,j}_s)`.
    pub fn labeling_activations(&self, j: usize, acts: &[ActivationVector]) -> Result<Vec<f64>> {
        self.check_activations(acts)?;
        let c1 = self.coeffs.c1[j];
        let mut out: Vec<f64> = acts[j].values.iter().map(|a| c1 * a).collect();
        for l in (0..self.k()).filter(|&l| l != j) {
            let c2 = self.coeffs.c2[l][j];
            if c2 == 0.0 {
                continue;
            }
            let drive = self.lateral_drive(l, j, &acts[l].values)?;
            for (o, d) in out.iter_mut().zip(drive) {
                *o += c2 * d;
            }
        }
        Ok(out)
    }

    pub fn labeling_activation(
        &self,
        j: usize,
        s: usize,
        acts: &[ActivationVector],
    ) -> Result<f64> {
        if j >= self.k() || s >= self.maps[j].neurons() {
            return Err(ResomError::Index {
                context: "labeling neuron",
                index: s,
                len: self.maps.get(j).map_or(0, |m| m.neurons()),
            });
        }
        Ok(self.labeling_activations(j, acts)?[s])
    }

    /// Assigns every neuron the class with the largest share of its summed
    /// labeling activation over the annotated samples. Ties go to the
    /// smallest class id; neurons that never activate stay unlabeled.
    pub fn label_neurons<S, V>(
        &mut self,
        samples: &[S],
        classes: &[ClassId],
        num_classes: usize,
    ) -> Result<()>
    where
        S: AsRef<[V]>,
        V: AsRef<[f64]>,
    {
        check_len("labeling classes", samples.len(), classes.len())?;
        if samples.is_empty() {
            return Err(ResomError::input("labeling set is empty"));
        }
        if num_classes == 0 || num_classes > ClassId::MAX as usize {
            return Err(ResomError::param(format!(
                "unsupported class count {num_classes}"
            )));
        }
        if let Some(c) = classes.iter().find(|c| **c as usize >= num_classes) {
            return Err(ResomError::input(format!(
                "class {c} outside {num_classes} classes"
            )));
        }
        let mut seen = vec![false; num_classes];
        classes.iter().for_each(|c| seen[*c as usize] = true);
        for (c, _) in seen.iter().enumerate().filter(|(_, s)| !**s) {
            warn!("class {c} has no labeled samples; no neuron can be assigned to it");
        }

        let mut sums: Vec<Vec<Vec<f64>>> = self
            .maps
            .iter()
            .map(|m| vec![vec![0.0; num_classes]; m.neurons()])
            .collect();
        for (sample, &class) in samples.iter().zip(classes) {
            let acts = self.activations(sample.as_ref())?;
            for (j, per_neuron) in sums.iter_mut().enumerate() {
                let a = self.labeling_activations(j, &acts)?;
                for (tally, v) in per_neuron.iter_mut().zip(a) {
                    tally[class as usize] += v;
                }
            }
        }

        let mut labels = Vec::with_capacity(self.k());
        let mut probabilities = Vec::with_capacity(self.k());
        for per_neuron in sums {
            let mut map_labels = Vec::with_capacity(per_neuron.len());
            let mut map_probs = Vec::with_capacity(per_neuron.len());
            for tally in per_neuron {
                let total: f64 = tally.iter().sum();
                if total > 0.0 {
                    let p: Vec<f64> = tally.iter().map(|x| x / total).collect();
                    let mut best = 0;
                    for (c, v) in p.iter().enumerate() {
                        if *v > p[best] {
                            best = c;
                        }
                    }
                    map_labels.push(Some(best as ClassId));
                    map_probs.push(p);
                } else {
                    map_labels.push(None);
                    map_probs.push(vec![0.0; num_classes]);
                }
            }
            labels.push(map_labels);
            probabilities.push(map_probs);
        }
        self.labels = labels;
        self.probabilities = probabilities;
        self.classes = num_classes;
        Ok(())
    }

    /// Reentrant score `a^j_s * prod_{l != j} (a^l · W^{l,j}_s)` of every
    /// neuron, per map. With a single map the product is empty and the
    /// score is the afferent activation.
    pub fn inference_scores(&self, acts: &[ActivationVector]) -> Result<Vec<Vec<f64>>> {
        self.check_activations(acts)?;
        let mut scores = Vec::with_capacity(self.k());
        for j in 0..self.k() {
            let mut a = acts[j].values.clone();
            for l in (0..self.k()).filter(|&l| l != j) {
                let drive = self.lateral_drive(l, j, &acts[l].values)?;
                for (x, d) in a.iter_mut().zip(drive) {
                    *x *= d;
                }
            }
            scores.push(a);
        }
        Ok(scores)
    }

    /// Global winner `(map, neuron)` over all maps; ties go to the smallest
    /// map index, then the smallest neuron index.
    pub fn winner(&self, acts: &[ActivationVector]) -> Result<(usize, usize)> {
        let scores = self.inference_scores(acts)?;
        let mut best = (0, 0);
        let mut best_score = f64::NEG_INFINITY;
        for (j, s_scores) in scores.iter().enumerate() {
            for (s, &v) in s_scores.iter().enumerate() {
                if v > best_score {
                    best_score = v;
                    best = (j, s);
                }
            }
        }
        Ok(best)
    }

    pub fn predict_from_activations(&self, acts: &[ActivationVector]) -> Result<Prediction> {
        let (map, neuron) = self.winner(acts)?;
        match self.labels[map][neuron] {
            Some(class) => Ok(Prediction { class, map, neuron }),
            None => Err(ResomError::Prediction(format!(
                "winning neuron {neuron} of map {map} has no label"
            ))),
        }
    }

    /// Classifies one synchronized sample (one input vector per map).
    pub fn infer<V: AsRef<[f64]>>(&self, inputs: &[V]) -> Result<Prediction> {
        let acts = self.activations(inputs)?;
        self.predict_from_activations(&acts)
    }

    pub fn evaluate<S, V>(&self, samples: &[S], truth: &[ClassId]) -> Result<EvaluationReport>
    where
        S: AsRef<[V]>,
        V: AsRef<[f64]>,
    {
        check_len("test classes", samples.len(), truth.len())?;
        if self.classes == 0 {
            return Err(ResomError::Prediction("model has not been labeled".into()));
        }
        let mut outcomes = Vec::with_capacity(samples.len());
        for (sample, &t) in samples.iter().zip(truth) {
            let acts = self.activations(sample.as_ref())?;
            let (map, neuron) = self.winner(&acts)?;
            outcomes.push(SampleOutcome {
                truth: t,
                predicted: self.labels[map][neuron],
                map,
                neuron,
            });
        }
        EvaluationReport::from_outcomes(self.classes, outcomes)
    }

    /// Trains every lateral matrix on the synchronized training samples.
    /// Afferent activations are computed once per map (in parallel) and
    /// shared by all pairs touching that map.
    pub fn train_laterals<S, V>(&mut self, samples: &[S]) -> Result<Vec<SparsityStats>>
    where
        S: AsRef<[V]> + Sync,
        V: AsRef<[f64]>,
    {
        if samples.is_empty() {
            return Err(ResomError::input(
                "no samples to train lateral connections on",
            ));
        }
        for s in samples {
            check_len("modalities in sample", self.k(), s.as_ref().len())?;
        }
        let maps = &self.maps;
        let winners: Vec<Result<Vec<(usize, f64)>>> = thread::scope(|scope| {
            let handles: Vec<_> = (0..maps.len())
                .map(|j| {
                    scope.spawn(move || {
                        samples
                            .iter()
                            .map(|s| {
                                let a = maps[j].activation(s.as_ref()[j].as_ref())?;
                                Ok((a.bmu_index, a.bmu_value))
                            })
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("activation worker panicked"))
                .collect()
        });
        let winners = winners.into_iter().collect::<Result<Vec<_>>>()?;

        let pairs = self.pairs();
        let n = samples.len();
        let step = (n / 100).max(1);
        let mut all_stats = Vec::with_capacity(pairs.len());
        for ((l, j), w) in pairs.into_iter().zip(self.laterals.iter_mut()) {
            let mut stats = SparsityStats::default();
            for (i, (&(bx, ax), &(by, ay))) in winners[l].iter().zip(&winners[j]).enumerate() {
                w.hebb_update(bx, ax, by, ay)?;
                if (i + 1) % step == 0 || i + 1 == n {
                    stats.history.push((i + 1, w.sparsity()));
                }
            }
            stats.nonzero_fraction = w.sparsity();
            all_stats.push(stats);
        }
        Ok(all_stats)
    }

    /// Single-map model around map `j`, unlabeled, with `c1 = 1`.
    pub fn unimodal(&self, j: usize) -> Result<Self> {
        Self::build(
            vec![self.maps[j].clone()],
            1.0,
            LabelingCoefficients::unimodal(1),
        )
    }

    /// Copy with every lateral matrix pruned to `keep_fraction`.
    pub fn pruned(&self, keep_fraction: f64) -> Result<Self> {
        let mut out = self.clone();
        for w in &mut out.laterals {
            w.prune(keep_fraction)?;
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = BundleManifest {
            format: BUNDLE_FORMAT.to_string(),
            version: 1,
            k: self.k(),
            classes: self.classes,
            maps: Vec::new(),
            laterals: Vec::new(),
            c1: self.coeffs.c1.clone(),
            c2: self.coeffs.c2.clone(),
            labels: self.labels.clone(),
        };
        for (j, m) in self.maps.iter().enumerate() {
            let name = format!("map_{j}.bin");
            m.save(&dir.join(&name))?;
            manifest.maps.push(name);
        }
        for ((l, j), w) in self.pairs().into_iter().zip(&self.laterals) {
            let name = lateral_file_name(l, j);
            w.save(&dir.join(&name))?;
            manifest.laterals.push(LateralEntry { l, j, file: name });
        }
        write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: BundleManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST))?)?;
        if manifest.format != BUNDLE_FORMAT {
            return Err(ResomError::input(format!(
                "{} is not a model bundle manifest",
                dir.join(MANIFEST).display()
            )));
        }
        check_len("bundle maps", manifest.k, manifest.maps.len())?;
        check_len(
            "bundle laterals",
            lateral_count(manifest.k),
            manifest.laterals.len(),
        )?;
        let maps = manifest
            .maps
            .iter()
            .map(|f| SomMap::load(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        let mu = 1.0;
        let mut model = Self::build(
            maps,
            mu,
            LabelingCoefficients {
                c1: manifest.c1,
                c2: manifest.c2,
            },
        )?;
        for e in &manifest.laterals {
            if !(e.l < e.j && e.j < manifest.k) {
                return Err(ResomError::input(format!(
                    "bad lateral pair ({}, {})",
                    e.l, e.j
                )));
            }
            model.replace_lateral(e.l, e.j, LateralMatrix::load(&dir.join(&e.file))?)?;
        }
        model.set_labels(manifest.classes, manifest.labels)?;
        Ok(model)
    }
}

/// Trains one map per modality of `dataset` on the given rows, each map on
/// its own thread.
pub fn train_maps(
    params: &[SomParams],
    dataset: &MultimodalDataset,
    rows: &[usize],
) -> Result<Vec<SomMap>> {
    check_len("map parameter sets", dataset.k(), params.len())?;
    thread::scope(|scope| {
        let handles: Vec<_> = params
            .iter()
            .enumerate()
            .map(|(j, p)| {
                scope.spawn(move || {
                    let mut map = SomMap::new(p.clone())?;
                    map.train(&dataset.modality_rows(j, rows))?;
                    Ok(map)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("map training panicked"))
            .collect()
    })
}

const MANIFEST: &str = "manifest.json";
const BUNDLE_FORMAT: &str = "resom-model";

pub fn lateral_file_name(l: usize, j: usize) -> String {
    format!("lat_{l}_{j}.bin")
}

pub fn bundle_lateral_path(dir: &Path, l: usize, j: usize) -> PathBuf {
    dir.join(lateral_file_name(l, j))
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleManifest {
    format: String,
    version: u32,
    k: usize,
    classes: usize,
    maps: Vec<String>,
    laterals: Vec<LateralEntry>,
    c1: Vec<f64>,
    c2: Vec<Vec<f64>>,
    labels: Vec<Vec<Option<ClassId>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LateralEntry {
    l: usize,
    j: usize,
    file: String,
}
