use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gnn_readouts::experiments::config::{create_dir, read_json, resolve, write_json};
use gnn_readouts::experiments::{
    embedding_trajectory, permutation_robustness, ratio_report, run_sweep, GenConfig,
    RobustnessSpec, RunConfig, SweepSpec,
};
use gnn_readouts::graph::{split_dataset, Dataset};
use gnn_readouts::tensor::Precision;
use gnn_readouts::training::{train_run, RunOptions, RunStatus, TrainedModel};
use gnn_readouts::{Error, Result};

/// Graph neural networks with adaptive readouts: data generation,
/// training and experiment protocols.
#[derive(Debug, Parser)]
#[command(name = "gnn-readouts", version)]
struct Cli {
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Arithmetic precision of training and evaluation.
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Output graph file (JSON lines); metadata goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every cell of a sweep grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prediction error of saved models under node reorderings.
    Robustness {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe-embedding distances from a run record.
    Trajectory {
        /// `metrics.json` written by `train`, or a sweep run record.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Best neural versus best standard readout from a sweep directory.
    Ratio {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn precision(cli: &Cli) -> Option<Precision> {
    cli.precision
        .as_deref()
        .map(|p| p.parse().expect("validated by clap"))
}

fn config_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Returns true when every run completed.
fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Gen { config, out } => {
            let mut cfg: GenConfig = read_json(config)?;
            if let Some(s) = cli.seed {
                cfg.synthetic.seed = s;
            }
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            let ds = cfg.generate()?;
            ds.save(out)?;
            println!("wrote {} graphs to {}", ds.len(), out.display());
            Ok(true)
        }
        Command::Train { config, out } => {
            let mut cfg: RunConfig = read_json(config)?;
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            if let Some(p) = precision(cli) {
                cfg.train.precision = p;
            }
            let dataset_path = resolve(&config_dir(config), &cfg.dataset);
            let ds = Dataset::load(&dataset_path)?;
            let split = split_dataset(ds.len(), cfg.split_seed, cfg.split_fractions)?;
            let opts = RunOptions {
                dataset_name: gnn_readouts::experiments::sweep::dataset_name(&dataset_path),
                probe: cfg.probe.clone(),
            };
            let outcome = train_run(&cfg.model_spec(), &ds, &split, &cfg.train, &opts)?;
            create_dir(out)?;
            write_json(out.join("metrics.json"), &outcome.record)?;
            if let Some(model) = &outcome.trained {
                model.save(out.join("model.json"))?;
            }
            let r = &outcome.record;
            match r.status {
                RunStatus::Completed => println!(
                    "completed: {} epochs, best epoch {}, test {}",
                    r.epochs_run,
                    r.best_epoch,
                    serde_json::to_string(&r.test)?
                ),
                RunStatus::Failed => eprintln!(
                    "run failed: {}",
                    r.failure.as_deref().unwrap_or("unknown cause")
                ),
            }
            Ok(r.status == RunStatus::Completed)
        }
        Command::Sweep { config, out } => {
            let mut spec: SweepSpec = read_json(config)?;
            if let Some(s) = cli.seed {
                spec.seeds = vec![s];
            }
            if let Some(p) = precision(cli) {
                spec.train.precision = p;
            }
            create_dir(out)?;
            let report = run_sweep(&spec, &config_dir(config), out)?;
            print!(
                "{}",
                gnn_readouts::experiments::sweep::summary_csv(&report.summary)
            );
            if report.failed > 0 {
                eprintln!("{} of {} cells failed", report.failed, report.records.len());
            }
            Ok(report.failed == 0)
        }
        Command::Robustness { config, out } => {
            let mut spec: RobustnessSpec = read_json(config)?;
            if let Some(s) = cli.seed {
                spec.settings.seed = s;
            }
            let base = config_dir(config);
            let ds = Dataset::load(resolve(&base, &spec.dataset))?;
            let mut models = spec
                .models
                .iter()
                .map(|m| Ok((m.name.clone(), TrainedModel::load(resolve(&base, &m.path))?)))
                .collect::<Result<Vec<_>>>()?;
            if let Some(p) = precision(cli) {
                for (_, m) in &mut models {
                    m.precision = p;
                }
            }
            let refs: Vec<(String, &TrainedModel)> =
                models.iter().map(|(n, m)| (n.clone(), m)).collect();
            let report = permutation_robustness(&refs, &ds, &spec.settings)?;
            create_dir(out)?;
            write_json(out.join("robustness.json"), &report)?;
            write_text(&out.join("robustness_summary.csv"), &report.summary_csv())?;
            write_text(&out.join("robustness_samples.csv"), &report.samples_csv())?;
            print!("{}", report.summary_csv());
            Ok(true)
        }
        Command::Trajectory { input, out } => {
            let record = read_json(input)?;
            let t = embedding_trajectory(&record)?;
            create_dir(out)?;
            write_json(out.join("trajectory.json"), &t)?;
            write_text(&out.join("trajectory.csv"), &t.to_csv())?;
            println!(
                "probe {}: displacement {:.6e} over {} epochs",
                t.graph_id,
                t.displacement(),
                t.from_initial.len()
            );
            Ok(true)
        }
        Command::Ratio { input, out } => {
            create_dir(out)?;
            let report = ratio_report(input, out)?;
            print!("{}", gnn_readouts::experiments::ratio::ratio_csv(&report));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
