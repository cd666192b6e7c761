//! Experiment configuration, loss assembly and the training loop.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{make_windows, DatasetSpec, NormStats, SeriesWindowSet, Split, WindowSplit};
use crate::denoise::{dsm_loss_at, NoiseLevel};
use crate::disentangle::{tc_loss, FactorBatch};
use crate::error::{Error, Result};
use crate::evaluate::{self, Scores};
use crate::model::{kl_target, relative, LevelMode, ForecastModel, ModelConfig, ModelShape, TargetMarginal};
use crate::nn::{self, Adam};
use crate::rng;
use crate::schedule::{Chain, DiffusionSchedule, ScheduleParams};

pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_VAL: u64 = 2;
pub const STREAM_TEST: u64 = 3;

/// Weights of the KL, DSM and TC terms; the MSE term is unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub psi: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            psi: 0.5,
            lambda: 1.0,
            gamma: 0.01,
        }
    }
}

impl LossWeights {
    pub fn ett() -> Self {
        Self {
            psi: 0.05,
            lambda: 0.1,
            gamma: 0.001,
        }
    }

    pub fn zero() -> Self {
        Self {
            psi: 0.0,
            lambda: 0.0,
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("psi", self.psi), ("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub kl: f64,
    pub dsm: f64,
    pub tc: f64,
    pub mse: f64,
}

/// `ψ·kl + λ·dsm + γ·tc + mse`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("kl", c.kl), ("dsm", c.dsm), ("tc", c.tc), ("mse", c.mse)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: format!("{name} loss"),
                detail: v.to_string(),
            });
        }
    }
    Ok(w.psi * c.kl + w.lambda * c.dsm + w.gamma * c.tc + c.mse)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    /// Alternate between VAE-only and energy-only parameter updates.
    pub alternating: bool,
    /// Draw a diffusion step per sample instead of one per batch.
    pub per_sample_t: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 16,
            max_epochs: 20,
            patience: 5,
            clip_norm: 10.0,
            alternating: false,
            per_sample_t: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub diffuse_input: bool,
    pub diffuse_target: bool,
    pub use_dsm: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            diffuse_input: true,
            diffuse_target: true,
            use_dsm: true,
        }
    }
}

impl AblationFlags {
    /// The six variants of the ablation table, full model first.
    pub fn variants() -> Vec<(&'static str, AblationFlags)> {
        let f = |diffuse_input, diffuse_target, use_dsm| AblationFlags {
            diffuse_input,
            diffuse_target,
            use_dsm,
        };
        vec![
            ("full", f(true, true, true)),
            ("-Y", f(true, false, true)),
            ("-X", f(false, true, true)),
            ("-CDM", f(false, false, true)),
            ("-Y-DSM", f(true, false, false)),
            ("-CDM-DSM", f(false, false, false)),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub l_x: usize,
    pub l_y: usize,
    pub ratios: (usize, usize, usize),
    pub normalize: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            l_x: 8,
            l_y: 8,
            ratios: (7, 1, 2),
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub samples: usize,
    pub val_samples: usize,
    /// Clean the sample mean instead of averaging cleaned samples.
    pub clean_mean: bool,
    pub unbiased_crps: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            val_samples: 10,
            clean_mean: false,
            unbiased_crps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    pub window: WindowConfig,
    pub schedule: ScheduleParams,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub ablation: AblationFlags,
    pub eval: EvalConfig,
    pub seed: u64,
    /// Seeds used by multi-seed runs.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "d1".into(),
            dataset: DatasetSpec::default(),
            window: WindowConfig::default(),
            schedule: ScheduleParams::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            ablation: AblationFlags::default(),
            eval: EvalConfig::default(),
            seed: 0,
            seeds: (0..5).collect(),
        }
    }
}

impl ExperimentConfig {
    /// D1 drifts between regimes, so windows are modelled relative to their own level.
    pub fn d1() -> Self {
        let mut cfg = Self::default();
        cfg.model.level = LevelMode::WindowMean;
        cfg
    }

    pub fn d2() -> Self {
        Self {
            name: "d2".into(),
            dataset: DatasetSpec::D2 { seed: 0 },
            ..Self::default()
        }
    }

    /// Weighting and schedule used for the ETT family.
    pub fn ett(path: impl Into<PathBuf>, name: &str) -> Self {
        Self {
            name: name.into(),
            dataset: DatasetSpec::Csv {
                path: path.into(),
                target_dims: None,
                fraction: 1.0,
            },
            schedule: ScheduleParams::preset(name),
            loss: LossWeights::ett(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if !(o.lr.is_finite() && o.lr > 0.0) || o.batch_size == 0 || o.max_epochs == 0 {
            return Err(Error::Config("optimizer needs lr > 0, batch > 0 and epochs > 0".into()));
        }
        if !(o.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.window.l_x == 0 || self.window.l_y == 0 {
            return Err(Error::Config("window lengths must be positive".into()));
        }
        if self.eval.samples == 0 || self.eval.val_samples == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn prepare_windows(&self) -> Result<SeriesWindowSet> {
        let series = self.dataset.load()?;
        let w = &self.window;
        make_windows(&series, w.l_x, w.l_y, w.ratios, w.normalize)
    }
}

/// A fitted model together with what is needed to map raw windows in and out.
#[derive(Debug)]
pub struct TrainedModel {
    pub model: ForecastModel,
    pub config: ExperimentConfig,
    /// Statistics over all input columns; `None` when windows were raw.
    pub norm: Option<NormStats>,
    pub target_dims: Vec<usize>,
}

impl TrainedModel {
    pub fn shape(&self) -> ModelShape {
        self.model.shape()
    }

    pub fn target_norm(&self) -> Option<NormStats> {
        self.norm.as_ref().map(|n| n.select(&self.target_dims))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub kl: f64,
    pub dsm: f64,
    pub tc: f64,
    pub mse: f64,
    pub grad_norm: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trained: TrainedModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
}

pub fn model_shape(windows: &SeriesWindowSet) -> ModelShape {
    ModelShape {
        l_x: windows.l_x,
        l_y: windows.l_y,
        in_dims: windows.dims,
        out_dims: windows.target_dims.len(),
    }
}

fn gather(a: &Array3<f64>, idx: &[usize]) -> Result<Tensor> {
    let (_, r, c) = a.dim();
    let sel = a.select(Axis(0), idx);
    let data: Vec<f64> = sel.iter().copied().collect();
    nn::tensor(&data, &[idx.len(), r, c])
}

/// Diffuses each row `b` of `x` at its own step `steps[b]`.
fn diffuse_rows(
    x: &Tensor,
    steps: &[usize],
    schedule: &DiffusionSchedule,
    chain: Chain,
    noise: &Tensor,
) -> Result<Tensor> {
    let b = x.dim(0)?;
    let mut sig = Vec::with_capacity(b);
    let mut noi = Vec::with_capacity(b);
    for &t in steps {
        let (s, n) = schedule.coefficients(t, chain)?;
        sig.push(s);
        noi.push(n);
    }
    let shape = [b, 1, 1];
    let s = nn::tensor(&sig, &shape)?;
    let n = nn::tensor(&noi, &shape)?;
    Ok((x.broadcast_mul(&s)? + noise.broadcast_mul(&n)?)?)
}

struct StepTerms {
    total: Tensor,
    parts: LossComponents,
}

fn check_term(name: &str, v: f64, epoch: usize, batch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Training {
            epoch,
            batch,
            msg: format!("{name} loss is {v}"),
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn batch_loss<R: rand::Rng>(
    model: &ForecastModel,
    cfg: &ExperimentConfig,
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    y0: &Tensor,
    rng: &mut R,
    epoch: usize,
    batch: usize,
) -> Result<StepTerms> {
    let b = x0.dim(0)?;
    let steps: Vec<usize> = if cfg.optim.per_sample_t {
        (0..b).map(|_| schedule.sample_step(rng)).collect()
    } else {
        vec![schedule.sample_step(rng); b]
    };
    let flags = cfg.ablation;
    // Levels come from the clean input; diffusion and all loss terms then
    // work relative to them, as at inference.
    let (x0, level) = model.center(x0)?;
    let y0 = &relative(y0, level.as_ref())?;
    let x0 = &x0;
    let noise_x = crate::model::normal_like(x0, rng)?;
    let noise_y = crate::model::normal_like(y0, rng)?;
    let xt = if flags.diffuse_input {
        diffuse_rows(x0, &steps, schedule, Chain::Input, &noise_x)?
    } else {
        x0.clone()
    };
    let (yt, q) = if flags.diffuse_target {
        (
            diffuse_rows(y0, &steps, schedule, Chain::Target, &noise_y)?,
            TargetMarginal::diffused_per_sample(y0, schedule, &steps)?,
        )
    } else {
        (y0.clone(), TargetMarginal::clean(y0)?)
    };

    let z = model.bvae.encode(&xt, rng)?;
    let gen = model.bvae.decode(&z)?;
    let y_hat = gen.sample(rng)?;

    let kl = kl_target(&gen, &q)?;
    let mse = (&y_hat - &yt)?.sqr()?.mean_all()?;
    let tc = if b >= 2 {
        tc_loss(&FactorBatch::from_state(&z)?)?
    } else {
        nn::scalar(0.0)?
    };
    let dsm = match (&model.energy, flags.use_dsm) {
        (Some(energy), true) => {
            let noise = NoiseLevel::per_sample(schedule, &steps)?;
            Some(dsm_loss_at(energy, y0, &y_hat, &noise)?)
        }
        _ => None,
    };

    let parts = LossComponents {
        kl: check_term("kl", nn::to_scalar(&kl)?, epoch, batch)?,
        dsm: match &dsm {
            Some(d) => check_term("dsm", nn::to_scalar(d)?, epoch, batch)?,
            None => 0.0,
        },
        tc: check_term("tc", nn::to_scalar(&tc)?, epoch, batch)?,
        mse: check_term("mse", nn::to_scalar(&mse)?, epoch, batch)?,
    };
    let w = cfg.loss;
    let mut total = ((kl * w.psi)? + (tc * w.gamma)?)?;
    if let Some(d) = dsm {
        total = (total + (d * w.lambda)?)?;
    }
    total = (total + mse)?;
    Ok(StepTerms { total, parts })
}

/// Validation MSE of the point forecast on normalized targets.
fn validation_mse(model: &ForecastModel, split: &WindowSplit, cfg: &ExperimentConfig) -> Result<f64> {
    let seed = rng::seeded_stream(cfg.seed, STREAM_VAL);
    let pred = evaluate::predict_with_rng(
        model,
        &split.inputs,
        cfg.eval.val_samples,
        seed,
        cfg.eval.clean_mean,
    )?;
    evaluate::mse(pred.point.view().into_dyn(), split.targets.view().into_dyn())
}

/// Trains on the training split, early-stopping on validation MSE, and
/// returns the best-validation weights.
pub fn train(cfg: &ExperimentConfig, windows: &SeriesWindowSet) -> Result<TrainOutcome> {
    cfg.validate()?;
    if windows.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if windows.val.is_empty() {
        return Err(Error::Data("validation split is empty; early stopping needs one".into()));
    }
    let schedule = cfg.schedule.build()?;
    let shape = model_shape(windows);
    let model = ForecastModel::new(&cfg.model, shape, cfg.ablation.use_dsm, cfg.seed)?
        .with_target_dims(windows.target_dims.clone())?;
    let mut opt = Adam::new(cfg.optim.lr).with_clip(cfg.optim.clip_norm);
    let mut rng = rng::seeded_stream(cfg.seed, STREAM_TRAIN);

    let n = windows.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, nn::Snapshot)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut global_step = 0usize;

    for epoch in 1..=cfg.optim.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = LossComponents {
            kl: 0.0,
            dsm: 0.0,
            tc: 0.0,
            mse: 0.0,
        };
        let (mut loss_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.optim.batch_size).enumerate() {
            let x0 = gather(&windows.train.inputs, idx)?;
            let y0 = gather(&windows.train.targets, idx)?;
            let terms = batch_loss(&model, cfg, &schedule, &x0, &y0, &mut rng, epoch, bi)?;
            let total = check_term("total", nn::to_scalar(&terms.total)?, epoch, bi)?;
            let grads = terms.total.backward()?;
            let norm = if cfg.optim.alternating && model.energy.is_some() {
                let energy_turn = global_step % 2 == 1;
                opt.step_where(&model.store, &grads, |name| name.starts_with("energy.") == energy_turn)
            } else {
                opt.step(&model.store, &grads, None)
            }
            .map_err(|e| Error::Training {
                epoch,
                batch: bi,
                msg: e.to_string(),
            })?;
            global_step += 1;
            loss_sum += total;
            norm_sum += norm;
            sums.kl += terms.parts.kl;
            sums.dsm += terms.parts.dsm;
            sums.tc += terms.parts.tc;
            sums.mse += terms.parts.mse;
            batches += 1;
        }
        let k = batches as f64;
        let val_mse = validation_mse(&model, &windows.val, cfg)?;
        if !val_mse.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: batches,
                msg: format!("validation MSE is {val_mse}"),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / k,
            val_mse,
            kl: sums.kl / k,
            dsm: sums.dsm / k,
            tc: sums.tc / k,
            mse: sums.mse / k,
            grad_norm: norm_sum / k,
        };
        log::debug!(
            "epoch {epoch}: loss {:.4} val_mse {:.4}",
            record.train_loss,
            record.val_mse
        );
        history.push(record);
        let improved = best.as_ref().is_none_or(|(_, b, _)| val_mse < *b);
        if improved {
            best = Some((epoch, val_mse, model.store.snapshot()?));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.optim.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, best_val_mse, snap) = best.expect("at least one epoch ran");
    model.store.restore(&snap)?;
    Ok(TrainOutcome {
        trained: TrainedModel {
            model,
            config: cfg.clone(),
            norm: windows.norm.clone(),
            target_dims: windows.target_dims.clone(),
        },
        history,
        best_epoch,
        best_val_mse,
        stopped_early,
    })
}

pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

/// Trains and writes `best.ckpt`, `history.csv` and `config.json` under `run_dir`.
pub fn train_to_dir(
    cfg: &ExperimentConfig,
    windows: &SeriesWindowSet,
    run_dir: impl AsRef<Path>,
) -> Result<TrainOutcome> {
    let dir = run_dir.as_ref();
    fs::create_dir_all(dir)?;
    cfg.save(dir.join("config.json"))?;
    let outcome = train(cfg, windows)?;
    checkpoint::save(&outcome.trained, dir.join(CHECKPOINT_FILE))?;
    write_history(&outcome.history, dir.join(HISTORY_FILE))?;
    Ok(outcome)
}

/// Trains with `cfg` and scores the test split.
#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub test: Scores,
}

pub fn fit_and_score(cfg: &ExperimentConfig, windows: &SeriesWindowSet) -> Result<SeedRun> {
    let outcome = train(cfg, windows)?;
    if windows.test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let test = evaluate::score_split(
        &outcome.trained,
        windows.split(Split::Test),
        cfg.eval.samples,
        rng::seeded_stream(cfg.seed, STREAM_TEST),
    )?;
    Ok(SeedRun {
        seed: cfg.seed,
        outcome,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub crps_mean: f64,
    pub crps_std: f64,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    /// Per variant, per seed: `(seed, mse, crps)` or the error message.
    pub runs: Vec<(String, u64, std::result::Result<(f64, f64), String>)>,
}

/// Population mean and standard deviation; `(NaN, NaN)` for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs every ablation variant over `seeds`. A failing run is recorded and
/// the suite carries on.
pub fn ablation_suite(
    base: &ExperimentConfig,
    windows: &SeriesWindowSet,
    seeds: &[u64],
) -> AblationResult {
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (name, flags) in AblationFlags::variants() {
        let (mut mses, mut crpss, mut failed) = (Vec::new(), Vec::new(), 0);
        for &seed in seeds {
            let cfg = ExperimentConfig {
                ablation: flags,
                seed,
                ..base.clone()
            };
            match fit_and_score(&cfg, windows) {
                Ok(run) => {
                    mses.push(run.test.mse);
                    crpss.push(run.test.crps);
                    runs.push((name.to_string(), seed, Ok((run.test.mse, run.test.crps))));
                }
                Err(e) => {
                    log::warn!("variant {name} seed {seed} failed: {e}");
                    failed += 1;
                    runs.push((name.to_string(), seed, Err(e.to_string())));
                }
            }
        }
        let (mse_mean, mse_std) = mean_std(&mses);
        let (crps_mean, crps_std) = mean_std(&crpss);
        rows.push(AblationRow {
            variant: name.to_string(),
            mse_mean,
            mse_std,
            crps_mean,
            crps_std,
            succeeded: mses.len(),
            failed,
        });
    }
    AblationResult { rows, runs }
}

pub fn write_ablation_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "mse_mean", "mse_std", "crps_mean", "crps_std"])?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.mse_mean.to_string(),
            r.mse_std.to_string(),
            r.crps_mean.to_string(),
            r.crps_std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, DatasetSpec};
    use crate::denoise::EnergyConfig;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec::Toy {
                dims: 3,
                points: 160,
                seed: 0,
            },
            model: ModelConfig {
                level: Default::default(),
                embed_dim: 8,
                rnn_hidden: 8,
                rnn_layers: 1,
                hidden: 16,
                blocks: 2,
                factors: 3,
                energy: EnergyConfig {
                    hidden: 16,
                    ..EnergyConfig::default()
                },
            },
            schedule: ScheduleParams {
                steps: 50,
                ..ScheduleParams::default()
            },
            optim: OptimConfig {
                max_epochs: 3,
                lr: 1e-3,
                ..OptimConfig::default()
            },
            eval: EvalConfig {
                samples: 8,
                val_samples: 4,
                ..EvalConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let ones = LossComponents {
            kl: 1.0,
            dsm: 1.0,
            tc: 1.0,
            mse: 1.0,
        };
        let v = total_loss(&ones, &LossWeights::ett()).unwrap();
        assert!((v - 1.151).abs() < 1e-12);
        let c = LossComponents {
            kl: 3.0,
            dsm: 2.0,
            tc: 5.0,
            mse: 0.25,
        };
        assert_eq!(total_loss(&c, &LossWeights::zero()).unwrap(), 0.25);
        let bad = LossComponents { tc: f64::NAN, ..c };
        let err = total_loss(&bad, &LossWeights::default()).unwrap_err().to_string();
        assert!(err.contains("tc"), "{err}");
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = ExperimentConfig::ett("data/ETTh1.csv", "etth1");
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.schedule.beta_end, 0.1);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 4}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.optim, OptimConfig::default());
        let bad = r#"{"loss": {"psi": -1.0, "lambda": 0.0, "gamma": 0.0}}"#;
        assert!(ExperimentConfig::from_json(bad).is_err());
    }

    #[test]
    fn six_variants() {
        let v = AblationFlags::variants();
        assert_eq!(v.len(), 6);
        assert_eq!(v[0].1, AblationFlags::default());
        assert_eq!(
            v[5].1,
            AblationFlags {
                diffuse_input: false,
                diffuse_target: false,
                use_dsm: false
            }
        );
    }

    #[test]
    fn training_is_deterministic_and_keeps_best() {
        let cfg = tiny_config();
        let windows = cfg.prepare_windows().unwrap();
        let a = train(&cfg, &windows).unwrap();
        let b = train(&cfg, &windows).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.trained.model.store.snapshot().unwrap(), b.trained.model.store.snapshot().unwrap());
        assert!(a.history.len() <= cfg.optim.max_epochs);
        let best = a.history.iter().map(|r| r.val_mse).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_val_mse, best);
    }

    #[test]
    fn alternating_and_per_sample_paths_run() {
        let mut cfg = tiny_config();
        cfg.optim.max_epochs = 1;
        cfg.optim.alternating = true;
        cfg.optim.per_sample_t = true;
        let windows = cfg.prepare_windows().unwrap();
        let out = train(&cfg, &windows).unwrap();
        assert!(out.history[0].train_loss.is_finite());
    }

    #[test]
    fn empty_validation_is_rejected() {
        let cfg = tiny_config();
        let series = cfg.dataset.load().unwrap();
        let windows = make_windows(&series, 8, 8, (1, 0, 0), true).unwrap();
        assert!(train(&cfg, &windows).is_err());
    }

    #[test]
    fn mean_std_is_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }
}
