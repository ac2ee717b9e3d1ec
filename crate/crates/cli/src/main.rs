use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use resom::distributed::{FanOut, NodeConfig, NodeServer};
use resom::{MultimodalDataset, ResomError, ResomModel, Result};
use resom_cli::commands::{self, DistOptions};
use resom_cli::config::ExperimentConfig;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "resom", version, about = "Reentrant self-organizing maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    label_fraction: Option<f64>,
}

impl ExperimentArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(f) = self.label_fraction {
            cfg.label_fraction = f;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DeployArgs {
    /// Node addresses, in map order.
    #[arg(long, value_delimiter = ',', required = true)]
    nodes: Vec<String>,
    #[arg(long, default_value_t = 0)]
    aggregator: usize,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
    /// JSON report path; the timing CSV is written next to it.
    #[arg(long)]
    report: PathBuf,
}

impl DeployArgs {
    fn options(&self) -> DistOptions<'_> {
        DistOptions {
            nodes: &self.nodes,
            aggregator: self.aggregator,
            timeout: Duration::from_millis(self.timeout_ms),
            limit: self.limit,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one map and write its weights and a PGM mosaic.
    TrainSom {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value_t = 0)]
        map: usize,
    },
    /// Train, label and evaluate a full model.
    Pipeline {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Accuracy as lateral connections are pruned.
    PruneSweep {
        /// Train a fresh model from this configuration.
        #[arg(long, conflicts_with_all = ["model", "data"])]
        config: Option<PathBuf>,
        /// Saved model bundle.
        #[arg(long, requires = "data")]
        model: Option<PathBuf>,
        /// Dataset bundle with labeling and test rows.
        #[arg(long, requires = "model")]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        keep: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV path; defaults to `prune_sweep.csv` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Nonzero fraction of each lateral matrix during Hebbian training.
    SparsityTrace {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Train on only the first N pairs.
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Build the configured dataset and save it as a bundle.
    Synth {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a node server.
    Serve {
        /// Node configuration (JSON).
        #[arg(long)]
        config: PathBuf,
    },
    /// Distributed inference over a dataset bundle's test rows.
    RunDist {
        #[command(flatten)]
        deploy: DeployArgs,
        #[arg(long)]
        test: PathBuf,
        /// Issue activation requests one node at a time.
        #[arg(long)]
        serial: bool,
    },
    /// Distributed Hebbian training over a dataset bundle's training rows.
    HebbDist {
        #[command(flatten)]
        deploy: DeployArgs,
        #[arg(long)]
        train: PathBuf,
        /// Directory the aggregator writes its lateral matrices into.
        #[arg(long)]
        persist: Option<PathBuf>,
    },
    /// Time parallel against serial fan-out on the same samples.
    Bench {
        #[command(flatten)]
        deploy: DeployArgs,
        #[arg(long)]
        test: PathBuf,
    },
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_data(path: &Path) -> Result<MultimodalDataset> {
    MultimodalDataset::load(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainSom { exp, map } => print_json(&commands::train_som(&exp.load()?, map)?),
        Command::Pipeline { exp } => print_json(&commands::pipeline(&exp.load()?)?),
        Command::PruneSweep {
            config,
            model,
            data,
            keep,
            seed,
            out,
        } => {
            let (model, data, keep, default_out) = match (config, model, data) {
                (Some(c), None, None) => {
                    let mut cfg = ExperimentConfig::load(&c)?;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    let data = cfg.dataset()?;
                    let fitted = commands::fit(&cfg, &data)?;
                    let keep = keep.unwrap_or(cfg.keep_fractions.clone());
                    (
                        fitted.model,
                        data,
                        keep,
                        Some(cfg.output_dir.join("prune_sweep.csv")),
                    )
                }
                (None, Some(m), Some(d)) => {
                    let keep = keep
                        .ok_or_else(|| ResomError::Param("keep: required with --model".into()))?;
                    (ResomModel::load(&m)?, load_data(&d)?, keep, None)
                }
                _ => {
                    return Err(ResomError::Param(
                        "prune-sweep needs --config or --model with --data".into(),
                    ))
                }
            };
            let path = out
                .or(default_out)
                .ok_or_else(|| ResomError::Param("out: required with --model".into()))?;
            let rows = commands::prune_sweep(&model, &data, &keep)?;
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            resom::write_atomic(&path, commands::prune_csv(&rows).as_bytes())?;
            print_json(&serde_json::json!({ "path": path, "rows": rows }))
        }
        Command::SparsityTrace { exp, pairs } => {
            let path = commands::sparsity_trace(&exp.load()?, pairs)?;
            print_json(&serde_json::json!({ "path": path }))
        }
        Command::Synth { exp, out } => print_json(&commands::write_dataset(&exp.load()?, &out)?),
        Command::Serve { config } => {
            let mut cfg = NodeConfig::load(&config)?;
            cfg.apply_env()?;
            let server = NodeServer::bind(cfg)?;
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "listening on {}", server.local_addr())?;
            stdout.flush()?;
            drop(stdout);
            server.run()
        }
        Command::RunDist {
            deploy,
            test,
            serial,
        } => {
            let fan = if serial {
                FanOut::Serial
            } else {
                FanOut::Parallel
            };
            let report = commands::run_dist(&deploy.options(), &load_data(&test)?, fan)?;
            let csv = commands::write_dist_report(&deploy.report, &report, Some(&report.timing))?;
            print_json(&serde_json::json!({
                "report": deploy.report,
                "timing_csv": csv,
                "accuracy": report.accuracy,
                "samples": report.samples,
            }))
        }
        Command::HebbDist {
            deploy,
            train,
            persist,
        } => {
            let report =
                commands::hebb_dist(&deploy.options(), &load_data(&train)?, persist.as_deref())?;
            commands::write_dist_report(&deploy.report, &report, report.timing.as_ref())?;
            print_json(&report)
        }
        Command::Bench { deploy, test } => {
            let report = commands::bench(&deploy.options(), &load_data(&test)?)?;
            commands::write_dist_report(&deploy.report, &report, Some(&report.parallel))?;
            print_json(&serde_json::json!({
                "samples": report.samples,
                "parallel_wall": report.parallel_wall,
                "serial_wall": report.serial_wall,
            }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body =
                serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
