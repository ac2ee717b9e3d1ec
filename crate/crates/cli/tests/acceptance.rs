//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with
//! a failure status when any criterion fails.

#[path = "../../core/tests/property_checks/mod.rs"]
mod property_checks;

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Instant;

use resom::distributed::{timing_report, NodeConfig, TimingSamples};
use resom::model::lateral_count;
use resom::{
    LabelingCoefficients, LateralMatrix, MultimodalDataset, ResomModel, SomMap, SomParams,
};
use resom_cli::commands::{evaluate, fit, prune_sweep, test_rows, unimodal_accuracy};
use resom_cli::config::{DatasetSpec, ExperimentConfig};

type Outcome = Result<(bool, String), String>;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load_config(name: &str, seed: u64, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&workspace().join("configs").join(name)).expect("config");
    cfg.seed = seed;
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("RESOM_MNIST_DIR")
        .map_or_else(|| workspace().join("data/mnist"), PathBuf::from)
}

fn criterion_1() -> Outcome {
    let dir = mnist_dir();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = load_config("mnist.json", 1, tmp.path());
    let DatasetSpec::Mnist { dir: d, .. } = &mut cfg.dataset else {
        return Err("configs/mnist.json is not an MNIST config".into());
    };
    *d = dir.clone();
    let data = cfg
        .dataset()
        .map_err(|e| format!("MNIST unavailable at {}: {e}", dir.display()))?;
    let model = fit(&cfg, &data).map_err(|e| e.to_string())?.model;
    let acc = evaluate(&model, &data).map_err(|e| e.to_string())?.accuracy;
    Ok((
        acc >= 0.84,
        format!(
            "10x10 map, {} train / {} labeled / {} test: accuracy {acc:.4} (need >= 0.84)",
            data.splits().train.len(),
            data.splits().labeling.len(),
            test_rows(&data).len()
        ),
    ))
}

struct SynthRun {
    model: ResomModel,
    data: MultimodalDataset,
    accuracy: f64,
    unimodal: Vec<f64>,
}

fn synth_runs() -> Result<Vec<SynthRun>, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    (1..=5)
        .map(|seed| {
            let cfg = load_config("synth.json", seed, tmp.path());
            let data = cfg.dataset().map_err(|e| e.to_string())?;
            let model = fit(&cfg, &data).map_err(|e| e.to_string())?.model;
            let accuracy = evaluate(&model, &data).map_err(|e| e.to_string())?.accuracy;
            let unimodal = (0..2)
                .map(|j| unimodal_accuracy(&model, &data, j))
                .collect::<resom::Result<Vec<_>>>()
                .map_err(|e| e.to_string())?;
            Ok(SynthRun {
                model,
                data,
                accuracy,
                unimodal,
            })
        })
        .collect()
}

fn criterion_2(runs: &[SynthRun]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let in_band = r.unimodal.iter().all(|a| (0.70..=0.90).contains(a));
        let best = r.unimodal.iter().cloned().fold(0.0, f64::max);
        let lift = r.accuracy - best;
        ok &= in_band && lift >= 0.02;
        parts.push(format!(
            "seed {}: uni {:.3}/{:.3} resom {:.3} lift {:+.1}",
            i + 1,
            r.unimodal[0],
            r.unimodal[1],
            r.accuracy,
            100.0 * lift
        ));
    }
    Ok((
        ok,
        format!(
            "{} (need unimodal in 0.70-0.90, lift >= 2 points)",
            parts.join("; ")
        ),
    ))
}

fn criterion_3() -> Outcome {
    let mut counts = Vec::new();
    let mut ok = true;
    for k in 1..=7usize {
        let maps = (0..k)
            .map(|j| SomMap::new(SomParams::new(2, 2, 1).with_seed(j as u64)))
            .collect::<resom::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let m = ResomModel::build(maps, 1.0, LabelingCoefficients::unimodal(k))
            .map_err(|e| e.to_string())?;
        ok &= m.laterals().len() == k * (k - 1) / 2 && lateral_count(k) == m.laterals().len();
        counts.push(m.laterals().len());
    }
    ok &= counts[6] == 21;
    Ok((ok, format!("k=1..7 -> {counts:?} lateral matrices")))
}

fn criterion_4(runs: &[SynthRun]) -> Outcome {
    let mut plateau = Vec::new();
    let mut collapse = Vec::new();
    for r in runs {
        let rows = prune_sweep(&r.model, &r.data, &[1.0, 0.1, 0.001]).map_err(|e| e.to_string())?;
        plateau.push(100.0 * (rows[0].1 - rows[1].1));
        collapse.push(100.0 * (rows[0].1 - rows[2].1));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (p, c) = (mean(&plateau), mean(&collapse));
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:+.2}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Ok((
        p.abs() <= 1.0 && c > 5.0,
        format!(
            "mean drop over the 5 models: keep 0.10 {p:+.2} points [{}] (need within 1.0), keep 0.001 {c:+.2} points [{}] (need > 5)",
            fmt(&plateau),
            fmt(&collapse)
        ),
    ))
}

/// A `resom serve` child process, killed on drop.
struct Node {
    child: Child,
    addr: String,
}

impl Drop for Node {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn spawn_node(dir: &Path, cfg: &NodeConfig) -> Result<Node, String> {
    let path = dir.join(format!("node{}.json", cfg.node_id));
    std::fs::write(&path, serde_json::to_vec(cfg).unwrap()).map_err(|e| e.to_string())?;
    let mut child = Command::new(env!("CARGO_BIN_EXE_resom"))
        .args(["serve", "--config"])
        .arg(&path)
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .map_err(|e| e.to_string())?;
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .ok_or_else(|| format!("unexpected node banner {line:?}"))?
        .to_string();
    Ok(Node { child, addr })
}

fn spawn_pair(dir: &Path, bundle: &Path, delay_ms: u64) -> Result<(Node, Node), String> {
    let mut c0 = NodeConfig::new(0, "127.0.0.1:0");
    c0.bundle = Some(bundle.to_path_buf());
    c0.activation_delay_ms = delay_ms;
    let mut c1 = NodeConfig::new(1, "127.0.0.1:0");
    c1.map_file = Some(bundle.join("map_1.bin"));
    c1.activation_delay_ms = delay_ms;
    Ok((spawn_node(dir, &c0)?, spawn_node(dir, &c1)?))
}

fn run_cli(args: &[&str]) -> Result<serde_json::Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_resom"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "resom {} failed: {}",
            args[0],
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    serde_json::from_slice(&std::fs::read(path).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())
}

fn criterion_5(run: &SynthRun) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (bundle, data_dir) = (tmp.path().join("model"), tmp.path().join("data"));
    run.model.save(&bundle).map_err(|e| e.to_string())?;
    run.data.save(&data_dir).map_err(|e| e.to_string())?;

    let rows = test_rows(&run.data);
    let rows = &rows[..300.min(rows.len())];
    let local = run
        .model
        .evaluate(&run.data.samples(rows), &run.data.classes_of(rows))
        .map_err(|e| e.to_string())?;
    let local: Vec<Option<u16>> = local.predictions.iter().map(|p| p.predicted).collect();

    let report = tmp.path().join("dist.json");
    let (a, b) = spawn_pair(tmp.path(), &bundle, 0)?;
    let nodes = format!("{},{}", a.addr, b.addr);
    run_cli(&[
        "run-dist",
        "--nodes",
        &nodes,
        "--aggregator",
        "0",
        "--limit",
        "300",
        "--test",
        data_dir.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ])?;
    drop((a, b));
    let remote: Vec<Option<u16>> =
        serde_json::from_value(read_json(&report)?["predictions"].clone())
            .map_err(|e| e.to_string())?;
    let same_predictions = remote == local;

    let train_n = 1000.min(run.data.splits().train.len());
    let persist = tmp.path().join("laterals");
    let (a, b) = spawn_pair(tmp.path(), &bundle, 0)?;
    let nodes = format!("{},{}", a.addr, b.addr);
    run_cli(&[
        "hebb-dist",
        "--nodes",
        &nodes,
        "--aggregator",
        "0",
        "--limit",
        &train_n.to_string(),
        "--train",
        data_dir.to_str().unwrap(),
        "--persist",
        persist.to_str().unwrap(),
        "--report",
        tmp.path().join("hebb.json").to_str().unwrap(),
    ])?;
    drop((a, b));
    let remote_w = LateralMatrix::load(&persist.join(resom::model::lateral_file_name(0, 1)))
        .map_err(|e| e.to_string())?;
    let mut fresh = ResomModel::build(
        run.model.maps().to_vec(),
        run.model.lateral(0, 1).mu(),
        run.model.coefficients().clone(),
    )
    .map_err(|e| e.to_string())?;
    let train = &run.data.splits().train[..train_n];
    fresh
        .train_laterals(&run.data.samples(train))
        .map_err(|e| e.to_string())?;
    let local_w = fresh.lateral(0, 1);
    let bitwise = remote_w.rows() == local_w.rows()
        && remote_w.cols() == local_w.cols()
        && remote_w
            .weights()
            .iter()
            .zip(local_w.weights())
            .all(|(x, y)| x.to_bits() == y.to_bits());
    Ok((
        same_predictions && bitwise,
        format!(
            "2 node processes: {} of {} predictions identical; Hebbian training on {train_n} pairs {}",
            remote.iter().zip(&local).filter(|(x, y)| x == y).count(),
            local.len(),
            if bitwise { "bitwise identical" } else { "differs" }
        ),
    ))
}

fn composed(activation: &[f64], transfer: f64, predict: f64) -> Result<(f64, f64), String> {
    let samples = TimingSamples {
        activation: activation.iter().map(|a| vec![*a]).collect(),
        transfer: vec![transfer; activation.len() - 1],
        predict: vec![predict],
        sample_wall: Vec::new(),
    };
    let r = timing_report(&samples, activation.len()).map_err(|e| e.to_string())?;
    Ok((r.parallel_estimate, r.serial_estimate))
}

fn criterion_6a() -> Outcome {
    let (p, _) = composed(&[0.0795, 0.1550], 0.016, 0.011)?;
    Ok((
        (p - 0.182).abs() <= 1e-9,
        format!("two-board parallel estimate {p:.12} (need 0.182 within 1e-9)"),
    ))
}

fn criterion_6b() -> Outcome {
    let (_, s) = composed(&[0.0795, 0.1550], 0.016, 0.011)?;
    Ok((
        (s - 0.246).abs() <= 1e-9,
        format!("two-board serial estimate {s:.12} (need 0.246 within 1e-9)"),
    ))
}

fn criterion_6c() -> Outcome {
    let (p, s) = composed(&[0.16; 4], 0.016, 0.0)?;
    Ok((
        (p - 0.208).abs() <= 1e-9 && (s - 0.64).abs() <= 1e-9,
        format!("four nodes: parallel {p:.12} serial {s:.12} (need 0.208 and 0.64 within 1e-9)"),
    ))
}

fn criterion_6d(run: &SynthRun) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (bundle, data_dir) = (tmp.path().join("model"), tmp.path().join("data"));
    run.model.save(&bundle).map_err(|e| e.to_string())?;
    run.data.save(&data_dir).map_err(|e| e.to_string())?;
    let (a, b) = spawn_pair(tmp.path(), &bundle, 40)?;
    let nodes = format!("{},{}", a.addr, b.addr);
    let out = run_cli(&[
        "bench",
        "--nodes",
        &nodes,
        "--limit",
        "10",
        "--test",
        data_dir.to_str().unwrap(),
        "--report",
        tmp.path().join("bench.json").to_str().unwrap(),
    ])?;
    let (p, s) = (
        out["parallel_wall"].as_f64().unwrap_or(f64::NAN),
        out["serial_wall"].as_f64().unwrap_or(f64::NAN),
    );
    Ok((
        p < s,
        format!("live 2 nodes, 40 ms compute: parallel {p:.4} s/sample, serial {s:.4} s/sample"),
    ))
}

fn criterion_7() -> Outcome {
    let mut failed = Vec::new();
    let all = property_checks::all();
    for (name, check) in &all {
        if let Err(e) = check() {
            failed.push(format!("{name}: {e}"));
        }
    }
    Ok((
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} property suites, 1000 cases each", all.len())
        } else {
            failed.join("; ")
        },
    ))
}

fn report(id: &str, title: &str, start: Instant, outcome: Outcome) -> bool {
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!(
        "{} [{id}] {title}: {detail} ({secs:.1} s)",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn main() {
    let mut results = Vec::new();
    let t = Instant::now();
    results.push(report("1", "unimodal MNIST", t, criterion_1()));

    let t = Instant::now();
    let runs = synth_runs();
    match &runs {
        Ok(runs) => {
            results.push(report("2", "multimodal lift", t, criterion_2(runs)));
            results.push(report("3", "lateral count", Instant::now(), criterion_3()));
            results.push(report(
                "4",
                "pruning plateau",
                Instant::now(),
                criterion_4(runs),
            ));
            let t = Instant::now();
            results.push(report(
                "5",
                "distributed equivalence",
                t,
                criterion_5(&runs[0]),
            ));
        }
        Err(e) => {
            for (id, title) in [
                ("2", "multimodal lift"),
                ("4", "pruning plateau"),
                ("5", "distributed equivalence"),
            ] {
                results.push(report(id, title, t, Err(e.clone())));
            }
            results.push(report("3", "lateral count", Instant::now(), criterion_3()));
        }
    }
    results.push(report(
        "6a",
        "timing composition, parallel",
        Instant::now(),
        criterion_6a(),
    ));
    results.push(report(
        "6b",
        "timing composition, serial",
        Instant::now(),
        criterion_6b(),
    ));
    results.push(report(
        "6c",
        "timing composition, four nodes",
        Instant::now(),
        criterion_6c(),
    ));
    let t = Instant::now();
    let live = match &runs {
        Ok(runs) => criterion_6d(&runs[0]),
        Err(e) => Err(e.clone()),
    };
    results.push(report("6d", "live parallel vs serial", t, live));
    results.push(report(
        "7",
        "property suites",
        Instant::now(),
        criterion_7(),
    ));

    let failed = results.iter().filter(|p| !**p).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
