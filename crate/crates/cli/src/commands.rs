//! Implementation of each subcommand. Every function writes its artifacts
//! atomically and returns a summary that `main` prints as JSON.

use std::path::{Path, PathBuf};
use std::time::Duration;

use resom::distributed::{Coordinator, FanOut, InitMode, TimingReport};
use resom::{
    train_maps, write_atomic, ClassId, EvaluationReport, MultimodalDataset, ResomError, ResomModel,
    Result, SomMap, SparsityStats,
};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::mosaic::{render_pgm, tile_shape};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Model trained end to end: maps, lateral connections and labels.
pub struct Fitted {
    pub model: ResomModel,
    pub sparsity: Vec<SparsityStats>,
}

pub fn fit(cfg: &ExperimentConfig, data: &MultimodalDataset) -> Result<Fitted> {
    let params = cfg.som_params(data)?;
    let train = &data.splits().train;
    log::info!("training {} maps on {} rows", params.len(), train.len());
    let maps = train_maps(&params, data, train)?;
    let mut model = ResomModel::build(maps, cfg.mu, cfg.coefficients()?)?;
    let sparsity = if model.k() > 1 {
        model.train_laterals(&data.samples(train))?
    } else {
        Vec::new()
    };
    label(&mut model, data)?;
    Ok(Fitted { model, sparsity })
}

pub fn label(model: &mut ResomModel, data: &MultimodalDataset) -> Result<()> {
    let rows = &data.splits().labeling;
    model.label_neurons(
        &data.samples(rows),
        &data.classes_of(rows),
        data.num_classes(),
    )
}

/// Rows to score on: the test split, or every row when it is empty.
pub fn test_rows(data: &MultimodalDataset) -> Vec<usize> {
    if data.splits().test.is_empty() {
        (0..data.len()).collect()
    } else {
        data.splits().test.clone()
    }
}

pub fn evaluate(model: &ResomModel, data: &MultimodalDataset) -> Result<EvaluationReport> {
    let rows = test_rows(data);
    model.evaluate(&data.samples(&rows), &data.classes_of(&rows))
}

/// Accuracy of map `j` alone, labeled and tested on its own modality.
pub fn unimodal_accuracy(model: &ResomModel, data: &MultimodalDataset, j: usize) -> Result<f64> {
    let mut single = model.unimodal(j)?;
    let only = data.select_modalities(&[j])?;
    label(&mut single, &only)?;
    Ok(evaluate(&single, &only)?.accuracy)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSomSummary {
    pub map: usize,
    pub rows: usize,
    pub weights: PathBuf,
    pub mosaic: PathBuf,
    pub mosaic_size: [usize; 2],
}

pub fn train_som(cfg: &ExperimentConfig, j: usize) -> Result<TrainSomSummary> {
    let data = cfg.dataset()?;
    if j >= data.k() {
        return Err(ResomError::Param(format!(
            "map: index {j} but the dataset has {} modalities",
            data.k()
        )));
    }
    let params = cfg.som_params(&data)?;
    let rows = data.modality_rows(j, &data.splits().train);
    let mut map = SomMap::new(params[j].clone())?;
    map.train(&rows)?;
    let tile = tile_shape(map.input_dim(), cfg.maps[j].tile)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let weights = cfg.output_dir.join(format!("map_{j}.bin"));
    let mosaic = cfg.output_dir.join(format!("map_{j}.pgm"));
    map.save(&weights)?;
    write_atomic(&mosaic, &render_pgm(&map, tile)?)?;
    Ok(TrainSomSummary {
        map: j,
        rows: rows.len(),
        weights,
        mosaic,
        mosaic_size: [map.params().width * tile.1, map.params().height * tile.0],
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PairSparsity {
    pub pair: [usize; 2],
    pub nonzero_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub k: usize,
    pub classes: usize,
    pub train_rows: usize,
    pub labeling_rows: usize,
    pub test_rows: usize,
    pub accuracy: f64,
    pub unlabeled: u64,
    pub unimodal_accuracy: Vec<f64>,
    pub laterals: Vec<PairSparsity>,
}

/// Full run: writes `report.json`, `confusion.csv`, the model bundle in
/// `model/` and the split dataset in `data/`.
pub fn pipeline(cfg: &ExperimentConfig) -> Result<PipelineReport> {
    let data = cfg.dataset()?;
    let fitted = fit(cfg, &data)?;
    let model = &fitted.model;
    let eval = evaluate(model, &data)?;
    let unimodal = (0..model.k())
        .map(|j| unimodal_accuracy(model, &data, j))
        .collect::<Result<Vec<_>>>()?;
    let report = PipelineReport {
        seed: cfg.seed,
        k: model.k(),
        classes: model.classes(),
        train_rows: data.splits().train.len(),
        labeling_rows: data.splits().labeling.len(),
        test_rows: test_rows(&data).len(),
        accuracy: eval.accuracy,
        unlabeled: eval.unlabeled,
        unimodal_accuracy: unimodal,
        laterals: model
            .pairs()
            .into_iter()
            .zip(&fitted.sparsity)
            .map(|((l, j), s)| PairSparsity {
                pair: [l, j],
                nonzero_fraction: s.nonzero_fraction,
            })
            .collect(),
    };
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    model.save(&out.join("model"))?;
    data.save(&out.join("data"))?;
    write_atomic(&out.join("confusion.csv"), eval.confusion_csv().as_bytes())?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Accuracy after pruning every lateral matrix to each keep fraction.
/// Neurons are relabeled after each prune.
pub fn prune_sweep(
    model: &ResomModel,
    data: &MultimodalDataset,
    keep: &[f64],
) -> Result<Vec<(f64, f64)>> {
    keep.iter()
        .map(|&f| {
            let mut m = model.pruned(f)?;
            label(&mut m, data)?;
            Ok((f, evaluate(&m, data)?.accuracy))
        })
        .collect()
}

pub fn prune_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("keep_fraction,accuracy\n");
    for (f, a) in rows {
        out.push_str(&format!("{f},{a}\n"));
    }
    out
}

/// `pair,iteration,nonzero_fraction` rows, starting from the empty matrix
/// at iteration 0.
pub fn sparsity_csv(pairs: &[(usize, usize)], stats: &[SparsityStats]) -> String {
    let mut out = String::from("pair,iteration,nonzero_fraction\n");
    for (&(l, j), s) in pairs.iter().zip(stats) {
        out.push_str(&format!("{l}-{j},0,0\n"));
        for (it, frac) in &s.history {
            out.push_str(&format!("{l}-{j},{it},{frac}\n"));
        }
    }
    out
}

/// Trains the maps, then the lateral matrices on the first `limit`
/// training rows, and writes `sparsity_trace.csv`.
pub fn sparsity_trace(cfg: &ExperimentConfig, limit: Option<usize>) -> Result<PathBuf> {
    let data = cfg.dataset()?;
    if data.k() < 2 {
        return Err(ResomError::Param(
            "sparsity trace needs at least two modalities".into(),
        ));
    }
    let params = cfg.som_params(&data)?;
    let train = &data.splits().train;
    let maps = train_maps(&params, &data, train)?;
    let mut model = ResomModel::build(maps, cfg.mu, cfg.coefficients()?)?;
    let n = limit.unwrap_or(train.len()).min(train.len());
    let stats = if n == 0 {
        vec![SparsityStats::default(); model.laterals().len()]
    } else {
        model.train_laterals(&data.samples(&train[..n]))?
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join("sparsity_trace.csv");
    write_atomic(&path, sparsity_csv(&model.pairs(), &stats).as_bytes())?;
    Ok(path)
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub path: PathBuf,
    pub rows: usize,
    pub k: usize,
    pub classes: usize,
}

/// Builds the configured dataset with its splits and saves it as a bundle.
pub fn write_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<SynthSummary> {
    let data = cfg.dataset()?;
    data.save(out)?;
    Ok(SynthSummary {
        path: out.to_path_buf(),
        rows: data.len(),
        k: data.k(),
        classes: data.num_classes(),
    })
}

/// Rows from a dataset bundle: its `split` rows, capped at `limit`.
pub fn bundle_rows<'a>(
    data: &'a MultimodalDataset,
    rows: &[usize],
    limit: Option<usize>,
) -> (Vec<Vec<&'a [f64]>>, Vec<ClassId>) {
    let n = limit.unwrap_or(rows.len()).min(rows.len());
    (data.samples(&rows[..n]), data.classes_of(&rows[..n]))
}

#[derive(Debug, Clone, Serialize)]
pub struct DistReport {
    pub fan_out: FanOut,
    pub samples: usize,
    pub accuracy: f64,
    pub unlabeled: u64,
    pub confusion: Vec<Vec<u64>>,
    pub predictions: Vec<Option<ClassId>>,
    pub timing: TimingReport,
}

pub struct DistOptions<'a> {
    pub nodes: &'a [String],
    pub aggregator: usize,
    pub timeout: Duration,
    pub limit: Option<usize>,
}

pub fn run_dist(opts: &DistOptions, data: &MultimodalDataset, fan: FanOut) -> Result<DistReport> {
    let mut coord = Coordinator::connect(opts.nodes, opts.aggregator, opts.timeout)?;
    coord.init(InitMode::Inference)?;
    let (samples, truth) = bundle_rows(data, &test_rows(data), opts.limit);
    let result = coord.run_inference(&samples, &truth, fan);
    coord.shutdown()?;
    let (eval, timing) = result?;
    Ok(DistReport {
        fan_out: fan,
        samples: samples.len(),
        accuracy: eval.accuracy,
        unlabeled: eval.unlabeled,
        confusion: eval.confusion,
        predictions: eval.predictions.iter().map(|p| p.predicted).collect(),
        timing,
    })
}

/// Writes `report` as JSON and its timing table next to it as CSV.
pub fn write_dist_report<T: Serialize>(
    path: &Path,
    report: &T,
    timing: Option<&TimingReport>,
) -> Result<PathBuf> {
    write_json(path, report)?;
    let csv = path.with_extension("csv");
    if let Some(t) = timing {
        write_atomic(&csv, t.to_csv().as_bytes())?;
    }
    Ok(csv)
}

#[derive(Debug, Clone, Serialize)]
pub struct HebbReport {
    pub samples: usize,
    pub persisted: Option<PathBuf>,
    pub timing: Option<TimingReport>,
}

/// Distributed Hebbian training on the training rows; lateral matrices
/// start from zero and are written to `persist` when given.
pub fn hebb_dist(
    opts: &DistOptions,
    data: &MultimodalDataset,
    persist: Option<&Path>,
) -> Result<HebbReport> {
    let mut coord = Coordinator::connect(opts.nodes, opts.aggregator, opts.timeout)?;
    coord.init(InitMode::Hebbian)?;
    let (samples, _) = bundle_rows(data, &data.splits().train, opts.limit);
    let abs = match persist {
        Some(p) => {
            std::fs::create_dir_all(p)?;
            Some(std::fs::canonicalize(p)?)
        }
        None => None,
    };
    let result = coord.run_hebb_training(&samples, abs.as_deref());
    coord.shutdown()?;
    let run = result?;
    Ok(HebbReport {
        samples: run.samples,
        persisted: abs,
        timing: run.timing,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub samples: usize,
    pub parallel: TimingReport,
    pub serial: TimingReport,
    /// Mean measured wall time per sample in each mode.
    pub parallel_wall: f64,
    pub serial_wall: f64,
}

/// Runs the same samples with parallel and then serial fan-out.
pub fn bench(opts: &DistOptions, data: &MultimodalDataset) -> Result<BenchReport> {
    let mut coord = Coordinator::connect(opts.nodes, opts.aggregator, opts.timeout)?;
    coord.init(InitMode::Inference)?;
    let (samples, truth) = bundle_rows(data, &test_rows(data), opts.limit);
    let runs = coord
        .run_inference(&samples, &truth, FanOut::Parallel)
        .and_then(|(_, p)| Ok((p, coord.run_inference(&samples, &truth, FanOut::Serial)?.1)));
    coord.shutdown()?;
    let (parallel, serial) = runs?;
    let wall = |t: &TimingReport| t.sample_wall.map_or(0.0, |w| w.mean);
    Ok(BenchReport {
        samples: samples.len(),
        parallel_wall: wall(&parallel),
        serial_wall: wall(&serial),
        parallel,
        serial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layouts() {
        assert_eq!(
            prune_csv(&[(1.0, 0.9), (0.1, 0.85)]),
            "keep_fraction,accuracy\n1,0.9\n0.1,0.85\n"
        );
        let s = SparsityStats {
            nonzero_fraction: 0.5,
            history: vec![(1, 0.25), (2, 0.5)],
        };
        assert_eq!(
            sparsity_csv(&[(0, 1)], &[s]),
            "pair,iteration,nonzero_fraction\n0-1,0,0\n0-1,1,0.25\n0-1,2,0.5\n"
        );
        assert_eq!(
            sparsity_csv(&[(0, 2)], &[SparsityStats::default()]),
            "pair,iteration,nonzero_fraction\n0-2,0,0\n"
        );
    }
}
