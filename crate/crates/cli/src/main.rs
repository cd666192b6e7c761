use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cdvae::data::{self, DatasetSpec};
use cdvae::evaluate;
use cdvae::pipeline::{self, ToyConfig};
use cdvae::schedule::ScheduleParams;
use cdvae::train::{self, ExperimentConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "cdvae", version, about = "Coupled-diffusion VAE forecaster for short noisy series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    D1,
    D2,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    D1,
    D2,
    Toy,
}

/// Experiment settings: a preset or JSON file, then per-field overrides.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config JSON; overrides `--preset`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "d1")]
    preset: Preset,
    /// Train on a CSV file instead of the preset's synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fraction of the CSV rows to keep, from the start.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds for multi-seed commands.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    l_x: Option<usize>,
    #[arg(long)]
    l_y: Option<usize>,
    #[arg(long)]
    psi: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    /// Number of diffusion steps T.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    no_diffuse_input: bool,
    #[arg(long)]
    no_diffuse_target: bool,
    #[arg(long)]
    no_dsm: bool,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    alternating: bool,
    #[arg(long)]
    per_sample_t: bool,
}

impl ConfigArgs {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => match self.preset {
                Preset::D1 => ExperimentConfig::d1(),
                Preset::D2 => ExperimentConfig::d2(),
            },
        };
        if let Some(path) = &self.data {
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            cfg.name = name.clone();
            cfg.schedule = ScheduleParams::preset(&name);
            cfg.dataset = DatasetSpec::Csv {
                path: path.clone(),
                target_dims: None,
                fraction: self.fraction.unwrap_or(1.0),
            };
        }
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(cfg.seed, self.seed);
        set!(cfg.seeds, self.seeds.clone());
        set!(cfg.optim.max_epochs, self.epochs);
        set!(cfg.optim.lr, self.lr);
        set!(cfg.optim.batch_size, self.batch_size);
        set!(cfg.optim.patience, self.patience);
        set!(cfg.window.l_x, self.l_x);
        set!(cfg.window.l_y, self.l_y);
        set!(cfg.loss.psi, self.psi);
        set!(cfg.loss.lambda, self.lambda);
        set!(cfg.loss.gamma, self.gamma);
        set!(cfg.schedule.beta_end, self.beta_end);
        set!(cfg.schedule.steps, self.steps);
        set!(cfg.schedule.omega, self.omega);
        set!(cfg.eval.samples, self.samples);
        cfg.ablation.diffuse_input &= !self.no_diffuse_input;
        cfg.ablation.diffuse_target &= !self.no_diffuse_target;
        cfg.ablation.use_dsm &= !self.no_dsm;
        cfg.optim.alternating |= self.alternating;
        cfg.optim.per_sample_t |= self.per_sample_t;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic series to CSV.
    GenData {
        #[arg(long, value_enum, default_value = "d1")]
        kind: DataKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Toy series length.
        #[arg(long, default_value_t = 400)]
        points: usize,
        /// Toy series width.
        #[arg(long, default_value_t = 5)]
        dims: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint, history and test scores.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast from the last `l_x` rows of a raw CSV using a checkpoint.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-seed train + test run producing the results table.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the six ablation variants over the configured seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid over β_end and T.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        beta_ends: Vec<f64>,
        #[arg(long = "step-grid", value_delimiter = ',', required = true)]
        step_grid: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diffuse the first rows of a dataset at several steps.
    InspectDiffusion {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,10,50,100")]
        at: Vec<usize>,
        /// Rows of the series to diffuse.
        #[arg(long, default_value_t = 64)]
        rows: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the plain recurrent baseline on toy series of several lengths.
    ToyOverfit {
        #[arg(long, value_delimiter = ',', default_value = "400,1600")]
        points: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            kind,
            seed,
            points,
            dims,
            out,
        } => {
            let spec = match kind {
                DataKind::D1 => DatasetSpec::D1 { seed },
                DataKind::D2 => DatasetSpec::D2 { seed },
                DataKind::Toy => DatasetSpec::Toy { dims, points, seed },
            };
            let series = spec.load()?;
            data::write_csv(&series, &out)?;
            let summary = json!({
                "dataset": spec.name(),
                "rows": series.len(),
                "dims": series.dims(),
                "target_dims": series.target_dims,
                "fingerprint": pipeline::fingerprint(&series),
                "path": out,
            });
            write_json(&out.with_extension("json"), &summary)
        }
        Command::Train { cfg, out } => {
            let cfg = cfg.build()?;
            let windows = cfg.prepare_windows()?;
            let outcome = train::train_to_dir(&cfg, &windows, &out)?;
            let test = if windows.test.is_empty() {
                None
            } else {
                Some(evaluate::score_split(
                    &outcome.trained,
                    &windows.test,
                    cfg.eval.samples,
                    cdvae::rng::seeded_stream(cfg.seed, train::STREAM_TEST),
                )?)
            };
            let summary = json!({
                "name": cfg.name,
                "seed": cfg.seed,
                "epochs_run": outcome.history.len(),
                "best_epoch": outcome.best_epoch,
                "best_val_mse": outcome.best_val_mse,
                "stopped_early": outcome.stopped_early,
                "test": test,
                "checkpoint": out.join(train::CHECKPOINT_FILE),
            });
            write_json(&out.join("summary.json"), &summary)
        }
        Command::Forecast {
            checkpoint,
            input,
            samples,
            seed,
            out,
        } => {
            let trained = cdvae::checkpoint::load(&checkpoint)?;
            let series = data::load_csv(&input, None)?;
            let l_x = trained.shape().l_x;
            if series.len() < l_x {
                bail!("input has {} rows, the model needs {l_x}", series.len());
            }
            let window = series.values.slice(ndarray::s![series.len() - l_x.., ..]).to_owned();
            let result = evaluate::forecast(&trained, &window, samples, seed)?;
            evaluate::write_forecast_csv(&result, &out)?;
            let summary = json!({
                "checkpoint": checkpoint,
                "samples": samples,
                "horizon": result.point.nrows(),
                "target_dims": trained.target_dims,
                "point": result.point.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
                "uncertainty": result.uncertainty.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            });
            write_json(&out.with_extension("json"), &summary)
        }
        Command::Eval { cfg, out } => {
            let cfg = cfg.build()?;
            let report = pipeline::run_experiment(&cfg, &out)?;
            println!("{}", serde_json::to_string(&report.rows)?);
            if !report.manifest.failures.is_empty() {
                log::warn!("{} seed(s) failed", report.manifest.failures.len());
            }
            Ok(())
        }
        Command::Ablate { cfg, out } => {
            let cfg = cfg.build()?;
            let windows = cfg.prepare_windows()?;
            fs::create_dir_all(&out)?;
            let result = train::ablation_suite(&cfg, &windows, &cfg.seeds);
            train::write_ablation_csv(&result.rows, out.join("ablation.csv"))?;
            write_json(&out.join("ablation.json"), &serde_json::to_value(&result)?)
        }
        Command::Sweep {
            cfg,
            beta_ends,
            step_grid,
            out,
        } => {
            let cfg = cfg.build()?;
            let windows = cfg.prepare_windows()?;
            fs::create_dir_all(&out)?;
            let cells = evaluate::sweep_schedule(&cfg, &beta_ends, &step_grid, &windows)?;
            evaluate::write_sweep_csv(&cells, out.join("sweep.csv"))?;
            write_json(&out.join("sweep.json"), &serde_json::to_value(&cells)?)
        }
        Command::InspectDiffusion { cfg, at, rows, out } => {
            let cfg = cfg.build()?;
            let series = cfg.dataset.load()?;
            let n = rows.min(series.len());
            let head = series.values.slice(ndarray::s![..n, ..]).to_owned();
            let schedule = cfg.schedule.build()?;
            let snaps = evaluate::diffusion_inspect(&head, &schedule, &at, cfg.seed)?;
            fs::create_dir_all(&out)?;
            evaluate::write_inspect_csv(&snaps, out.join("inspect_summary.csv"), out.join("inspect_values.csv"))?;
            let summary: Vec<_> = snaps
                .iter()
                .map(|s| json!({"t": s.t, "alpha_bar": s.alpha_bar, "deviation": s.deviation}))
                .collect();
            write_json(&out.join("inspect.json"), &json!(summary))
        }
        Command::ToyOverfit {
            points,
            epochs,
            seed,
            out,
        } => {
            let cfg = ToyConfig {
                epochs,
                seed,
                ..ToyConfig::default()
            };
            let curves = pipeline::toy_overfit_demo(&points, &cfg, &out)?;
            let summary: Vec<_> = curves
                .iter()
                .map(|c| {
                    json!({
                        "points": c.points,
                        "best_test_epoch": c.best_test_epoch(),
                        "final_train_loss": c.train_loss.last(),
                        "final_test_loss": c.test_loss.last(),
                        "path": c.path,
                    })
                })
                .collect();
            write_json(&out.join("toy.json"), &json!(summary))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
