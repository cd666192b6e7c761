//! End-to-end experiment runs and their bookkeeping.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use ndarray::Axis;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_toy, make_windows, RawSeries, Split};
use crate::error::{Error, Result};
use crate::evaluate::{self, Scores};
use crate::nn::{self, Adam, Gru, Linear, ParamStore};
use crate::rng;
use crate::train::{mean_std, train_to_dir, ExperimentConfig, STREAM_TEST};

/// SHA-256 over the series shape and its values as little-endian `f64`.
pub fn fingerprint(series: &RawSeries) -> String {
    let mut h = Sha256::new();
    let (r, c) = series.values.dim();
    h.update((r as u64).to_le_bytes());
    h.update((c as u64).to_le_bytes());
    for v in series.values.iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub dataset_fingerprint: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub artifacts: Vec<PathBuf>,
    pub failures: Vec<SeedFailure>,
}

impl RunManifest {
    pub fn start(config: &ExperimentConfig, series: &RawSeries) -> Self {
        Self {
            name: config.name.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            seeds: config.seeds.clone(),
            dataset_fingerprint: fingerprint(series),
            started_at: Utc::now().to_rfc3339(),
            finished_at: None,
            artifacts: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub scores: Scores,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub l_y: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub manifest: RunManifest,
    pub rows: Vec<ResultRow>,
    pub seeds: Vec<SeedResult>,
}

/// Builds mean/std rows for MSE and CRPS over the successful seeds.
pub fn aggregate(dataset: &str, l_y: usize, seeds: &[SeedResult], failed: usize) -> Vec<ResultRow> {
    let metric = |name: &str, f: fn(&Scores) -> f64| {
        let vals: Vec<f64> = seeds.iter().map(|s| f(&s.scores)).collect();
        let (mean, std) = mean_std(&vals);
        ResultRow {
            dataset: dataset.to_string(),
            l_y,
            metric: name.to_string(),
            mean,
            std,
            n_ok: seeds.len(),
            n_failed: failed,
        }
    };
    vec![metric("MSE", |s| s.mse), metric("CRPS", |s| s.crps)]
}

pub fn write_results_csv(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains and scores every seed of `config.seeds` under `out_dir`, writing
/// the manifest first and finalizing it once all seeds have run.
pub fn run_experiment(config: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<ExperimentReport> {
    config.validate()?;
    if config.seeds.is_empty() {
        return Err(Error::Config("no seeds to run".into()));
    }
    let out = out_dir.as_ref();
    fs::create_dir_all(out)?;
    let series = config.dataset.load()?;
    let w = &config.window;
    let windows = make_windows(&series, w.l_x, w.l_y, w.ratios, w.normalize)?;
    let manifest_path = out.join("manifest.json");
    let mut manifest = RunManifest::start(config, &series);
    manifest.write(&manifest_path)?;

    let mut results = Vec::new();
    for &seed in &config.seeds {
        let cfg = config.with_seed(seed);
        let run_dir = out.join(format!("seed_{seed}"));
        let attempt = train_to_dir(&cfg, &windows, &run_dir).and_then(|outcome| {
            let scores = evaluate::score_split(
                &outcome.trained,
                windows.split(Split::Test),
                cfg.eval.samples,
                rng::seeded_stream(seed, STREAM_TEST),
            )?;
            Ok(SeedResult {
                seed,
                scores,
                best_epoch: outcome.best_epoch,
                epochs_run: outcome.history.len(),
            })
        });
        match attempt {
            Ok(r) => {
                manifest.artifacts.push(run_dir.join(crate::train::CHECKPOINT_FILE));
                results.push(r);
            }
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                manifest.failures.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    if results.is_empty() {
        manifest.finished_at = Some(Utc::now().to_rfc3339());
        manifest.write(&manifest_path)?;
        return Err(Error::Training {
            epoch: 0,
            batch: 0,
            msg: "every seed failed".into(),
        });
    }
    if !manifest.failures.is_empty() {
        log::warn!(
            "aggregating over {} of {} seeds",
            results.len(),
            config.seeds.len()
        );
    }

    let rows = aggregate(&config.dataset.name(), w.l_y, &results, manifest.failures.len());
    let results_path = out.join("results.csv");
    write_results_csv(&rows, &results_path)?;
    let per_seed_path = out.join("per_seed.csv");
    {
        let mut wr = csv::Writer::from_path(&per_seed_path)?;
        wr.write_record(["seed", "mse", "crps", "mse_raw", "crps_raw", "best_epoch", "epochs_run"])?;
        for r in &results {
            wr.write_record([
                r.seed.to_string(),
                r.scores.mse.to_string(),
                r.scores.crps.to_string(),
                r.scores.mse_raw.to_string(),
                r.scores.crps_raw.to_string(),
                r.best_epoch.to_string(),
                r.epochs_run.to_string(),
            ])?;
        }
        wr.flush()?;
    }
    manifest.artifacts.push(results_path);
    manifest.artifacts.push(per_seed_path);
    manifest.finished_at = Some(Utc::now().to_rfc3339());
    manifest.write(&manifest_path)?;
    let report = ExperimentReport {
        manifest,
        rows,
        seeds: results,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

pub fn run_experiment_path(config: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<ExperimentReport> {
    run_experiment(&ExperimentConfig::load(config)?, out_dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub dims: usize,
    pub epochs: usize,
    pub hidden: usize,
    pub layers: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub l_x: usize,
    pub l_y: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dims: 5,
            epochs: 100,
            hidden: 64,
            layers: 2,
            lr: 1e-3,
            batch_size: 16,
            l_x: 8,
            l_y: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCurve {
    pub points: usize,
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub path: PathBuf,
}

impl ToyCurve {
    /// 1-based epoch of the lowest test loss.
    pub fn best_test_epoch(&self) -> usize {
        self.test_loss
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i + 1)
            .unwrap_or(0)
    }
}

/// Fits a plain recurrent forecaster on toy series of each length (7:3
/// split) and writes `toy_<points>.csv` loss curves.
pub fn toy_overfit_demo(counts: &[usize], cfg: &ToyConfig, out_dir: impl AsRef<Path>) -> Result<Vec<ToyCurve>> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out)?;
    let mut curves = Vec::with_capacity(counts.len());
    for &points in counts {
        if points < 32 {
            return Err(Error::Config(format!("toy run needs at least 32 points, got {points}")));
        }
        let series = generate_toy(cfg.dims, points, cfg.seed)?;
        let windows = make_windows(&series, cfg.l_x, cfg.l_y, (7, 0, 3), true)?;
        if windows.test.is_empty() {
            return Err(Error::Data(format!("{points} points leave no test window")));
        }
        let (train, test) = (&windows.train, &windows.test);
        let out_dims = windows.target_dims.len();

        let mut store = ParamStore::new();
        let mut r = rng::seeded(cfg.seed);
        let gru = Gru::new(&mut store, "toy.gru", windows.dims, cfg.hidden, cfg.layers, &mut r)?;
        let head = Linear::new(&mut store, "toy.head", cfg.hidden, cfg.l_y * out_dims, &mut r)?;
        let mut opt = Adam::new(cfg.lr);
        let to_tensor = |a: &ndarray::Array3<f64>| -> Result<candle_core::Tensor> {
            let (n, l, d) = a.dim();
            nn::tensor(&a.iter().copied().collect::<Vec<_>>(), &[n, l, d])
        };
        let predict = |x: &candle_core::Tensor| -> Result<candle_core::Tensor> {
            let h = gru.forward(x)?;
            let last = h.narrow(1, cfg.l_x - 1, 1)?.squeeze(1)?;
            Ok(head.forward(&last)?.reshape((x.dim(0)?, cfg.l_y, out_dims))?)
        };
        let test_x = to_tensor(&test.inputs)?;
        let test_y = to_tensor(&test.targets)?;

        let mut order: Vec<usize> = (0..train.len()).collect();
        let (mut train_curve, mut test_curve) = (Vec::new(), Vec::new());
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut r);
            let (mut sum, mut seen) = (0.0, 0usize);
            for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
                let x = to_tensor(&train.inputs.select(Axis(0), idx))?;
                let y = to_tensor(&train.targets.select(Axis(0), idx))?;
                let loss = (predict(&x)? - y)?.sqr()?.mean_all()?;
                let v = nn::to_scalar(&loss)?;
                if !v.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        batch: bi,
                        msg: format!("toy loss {v}"),
                    });
                }
                opt.step(&store, &loss.backward()?, None)?;
                sum += v * idx.len() as f64;
                seen += idx.len();
            }
            train_curve.push(sum / seen as f64);
            test_curve.push(nn::to_scalar(&(predict(&test_x)? - &test_y)?.sqr()?.mean_all()?)?);
        }

        let path = out.join(format!("toy_{points}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["epoch", "train_loss", "test_loss"])?;
        for (e, (a, b)) in train_curve.iter().zip(&test_curve).enumerate() {
            w.write_record([(e + 1).to_string(), a.to_string(), b.to_string()])?;
        }
        w.flush()?;
        curves.push(ToyCurve {
            points,
            train_loss: train_curve,
            test_loss: test_curve,
            path,
        });
    }
    Ok(curves)
}
