//! Energy network, multiscale denoising score matching and the denoising jump.
//!
//! The network is `E(u) = f(u) / σ_0²` with `f` a three-layer tanh MLP over the
//! flattened window. Its input gradient is written out as a forward expression
//! (backprop through `f` by hand), so the DSM loss, which contains `∇E`, only
//! needs first-order autodiff to reach the parameters.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Adam, Linear, ParamStore};
use crate::rng;
use crate::schedule::DiffusionSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub hidden: usize,
    pub sigma0: f64,
    /// Condition the energy on the diffusion noise level. Off by default:
    /// the jump at inference then uses the same function DSM trained.
    pub step_embedding: bool,
    pub step_features: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            sigma0: 0.1,
            step_embedding: false,
            step_features: 16,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0.is_finite() && self.sigma0 > 0.0) {
            return Err(Error::Config(format!("sigma0 must be positive, got {}", self.sigma0)));
        }
        if self.hidden == 0 || (self.step_embedding && self.step_features < 2) {
            return Err(Error::Config("energy widths must be positive".into()));
        }
        Ok(())
    }
}

/// Noise level the energy is evaluated at. `Clean` is used at inference.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseLevel {
    Clean,
    Shared(f64),
    PerSample(Vec<f64>),
}

impl NoiseLevel {
    pub fn at_step(schedule: &DiffusionSchedule, t: usize) -> Result<Self> {
        Ok(Self::Shared(schedule.sigma_at(t)?))
    }

    pub fn per_sample(schedule: &DiffusionSchedule, steps: &[usize]) -> Result<Self> {
        Ok(Self::PerSample(
            steps.iter().map(|&t| schedule.sigma_at(t)).collect::<Result<_>>()?,
        ))
    }

    /// Loss weights `l(σ) = σ`, one per batch row.
    fn weights(&self, batch: usize) -> Result<Vec<f64>> {
        match self {
            Self::Clean => Ok(vec![0.0; batch]),
            Self::Shared(s) => Ok(vec![*s; batch]),
            Self::PerSample(v) if v.len() == batch => Ok(v.clone()),
            Self::PerSample(v) => Err(Error::ShapeMismatch {
                expected: vec![batch],
                actual: vec![v.len()],
            }),
        }
    }
}

pub trait Energy {
    fn sigma0(&self) -> f64;

    /// `[B, …] -> [B]`
    fn energy(&self, y: &Tensor, level: &NoiseLevel) -> Result<Tensor>;

    /// `∇_y E`, same shape as `y`, differentiable with respect to parameters.
    fn grad(&self, y: &Tensor, level: &NoiseLevel) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct EnergyNet {
    l1: Linear,
    l2: Linear,
    l3: Linear,
    step: Option<Linear>,
    step_features: usize,
    sigma0: f64,
    input_dim: usize,
}

struct Activations {
    h1: Tensor,
    h2: Tensor,
}

impl EnergyNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &EnergyConfig,
        input_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let step = if cfg.step_embedding {
            Some(Linear::new(store, "energy.step", cfg.step_features, cfg.hidden, rng)?)
        } else {
            None
        };
        Ok(Self {
            l1: Linear::new(store, "energy.l1", input_dim, cfg.hidden, rng)?,
            l2: Linear::new(store, "energy.l2", cfg.hidden, cfg.hidden, rng)?,
            l3: Linear::new(store, "energy.l3", cfg.hidden, 1, rng)?,
            step,
            step_features: cfg.step_features,
            sigma0: cfg.sigma0,
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn level_features(&self, level: &NoiseLevel, batch: usize) -> Result<Option<Tensor>> {
        let Some(step) = &self.step else {
            return Ok(None);
        };
        // σ ∈ [0, 1]; stretch it so the sinusoid frequencies resolve small levels.
        let feats = |s: f64| nn::sinusoid(100.0 * s, self.step_features);
        let t = match level {
            NoiseLevel::Clean => nn::tensor(&feats(0.0), &[1, self.step_features])?,
            NoiseLevel::Shared(s) => nn::tensor(&feats(*s), &[1, self.step_features])?,
            NoiseLevel::PerSample(v) => {
                if v.len() != batch {
                    return Err(Error::ShapeMismatch {
                        expected: vec![batch],
                        actual: vec![v.len()],
                    });
                }
                let data: Vec<f64> = v.iter().flat_map(|s| feats(*s)).collect();
                nn::tensor(&data, &[batch, self.step_features])?
            }
        };
        Ok(Some(step.forward(&t)?))
    }

    fn flatten(&self, y: &Tensor) -> Result<Tensor> {
        let flat = y.flatten_from(1)?;
        if flat.dim(1)? != self.input_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![y.dim(0)?, self.input_dim],
                actual: y.dims().to_vec(),
            });
        }
        Ok(flat)
    }

    fn activations(&self, u: &Tensor, level: &NoiseLevel) -> Result<Activations> {
        let mut a1 = self.l1.forward(u)?;
        if let Some(emb) = self.level_features(level, u.dim(0)?)? {
            a1 = a1.broadcast_add(&emb)?;
        }
        let h1 = a1.tanh()?;
        let h2 = self.l2.forward(&h1)?.tanh()?;
        Ok(Activations { h1, h2 })
    }
}

impl Energy for EnergyNet {
    fn sigma0(&self) -> f64 {
        self.sigma0
    }

    fn energy(&self, y: &Tensor, level: &NoiseLevel) -> Result<Tensor> {
        let u = self.flatten(y)?;
        let act = self.activations(&u, level)?;
        let f = self.l3.forward(&act.h2)?.squeeze(1)?;
        Ok((f / (self.sigma0 * self.sigma0))?)
    }

    fn grad(&self, y: &Tensor, level: &NoiseLevel) -> Result<Tensor> {
        let u = self.flatten(y)?;
        let act = self.activations(&u, level)?;
        // w3 is [hidden, 1]; as a row it broadcasts over the batch.
        let w3 = self.l3.weight.t()?;
        let g2 = (act.h2.sqr()?.affine(-1.0, 1.0)?.broadcast_mul(&w3))?;
        let g1 = (g2.matmul(&self.l2.weight.t()?)? * act.h1.sqr()?.affine(-1.0, 1.0)?)?;
        let gu = g1.matmul(&self.l1.weight.t()?)?;
        Ok((gu / (self.sigma0 * self.sigma0))?.reshape(y.dims())?)
    }
}

/// `E(u) = ‖u − c‖² / (2σ_0²)`, minimized at `c`.
#[derive(Debug, Clone)]
pub struct QuadraticEnergy {
    pub center: Tensor,
    pub sigma0: f64,
}

impl Energy for QuadraticEnergy {
    fn sigma0(&self) -> f64 {
        self.sigma0
    }

    fn energy(&self, y: &Tensor, _level: &NoiseLevel) -> Result<Tensor> {
        let d = y.broadcast_sub(&self.center)?.sqr()?.flatten_from(1)?.sum(D::Minus1)?;
        Ok((d / (2.0 * self.sigma0 * self.sigma0))?)
    }

    fn grad(&self, y: &Tensor, _level: &NoiseLevel) -> Result<Tensor> {
        Ok((y.broadcast_sub(&self.center)? / (self.sigma0 * self.sigma0))?)
    }
}

/// Zero everywhere.
#[derive(Debug, Clone, Copy)]
pub struct FlatEnergy {
    pub sigma0: f64,
}

impl Energy for FlatEnergy {
    fn sigma0(&self) -> f64 {
        self.sigma0
    }

    fn energy(&self, y: &Tensor, _level: &NoiseLevel) -> Result<Tensor> {
        Ok(Tensor::zeros(y.dim(0)?, nn::DTYPE, y.device())?)
    }

    fn grad(&self, y: &Tensor, _level: &NoiseLevel) -> Result<Tensor> {
        Ok(y.zeros_like()?)
    }
}

/// `mean_b l(σ_b) · mean_entries (Y − Ŷ + σ_0²∇E(Ŷ))²`.
pub fn dsm_loss_at<E: Energy + ?Sized>(
    energy: &E,
    y_true: &Tensor,
    y_gen: &Tensor,
    level: &NoiseLevel,
) -> Result<Tensor> {
    if y_true.dims() != y_gen.dims() {
        return Err(Error::ShapeMismatch {
            expected: y_true.dims().to_vec(),
            actual: y_gen.dims().to_vec(),
        });
    }
    let b = y_gen.dim(0)?;
    let s2 = energy.sigma0().powi(2);
    let resid = ((y_true - y_gen)? + (energy.grad(y_gen, level)? * s2)?)?;
    let per_row = resid.sqr()?.flatten_from(1)?.mean(D::Minus1)?;
    let w = nn::tensor(&level.weights(b)?, &[b])?;
    Ok((per_row * w)?.mean_all()?)
}

pub fn dsm_loss<E: Energy + ?Sized>(
    energy: &E,
    y_true: &Tensor,
    y_gen: &Tensor,
    schedule: &DiffusionSchedule,
    t: usize,
) -> Result<Tensor> {
    dsm_loss_at(energy, y_true, y_gen, &NoiseLevel::at_step(schedule, t)?)
}

fn check_finite(what: &str, t: &Tensor) -> Result<Vec<f64>> {
    let v = nn::flat(t)?;
    let bad: Vec<usize> = v
        .iter()
        .enumerate()
        .filter(|(_, x)| !x.is_finite())
        .map(|(i, _)| i)
        .collect();
    if bad.is_empty() {
        return Ok(v);
    }
    let shown: Vec<String> = bad.iter().take(8).map(|i| i.to_string()).collect();
    Err(Error::NonFinite {
        what: what.into(),
        detail: format!(
            "{} entries of shape {:?} (flat indices {}{})",
            bad.len(),
            t.dims(),
            shown.join(", "),
            if bad.len() > 8 { ", …" } else { "" }
        ),
    })
}

/// `(Ŷ − σ_0²∇E(Ŷ), σ_0²∇E(Ŷ))`, evaluated at the clean level.
pub fn denoise_jump<E: Energy + ?Sized>(energy: &E, y_gen: &Tensor) -> Result<(Tensor, Tensor)> {
    check_finite("forecast", y_gen)?;
    let y = y_gen.detach();
    let unc = (energy.grad(&y, &NoiseLevel::Clean)? * energy.sigma0().powi(2))?.detach();
    check_finite("energy gradient", &unc)?;
    Ok(((&y - &unc)?, unc))
}

/// `Y_k = Y_{k-1} − (ρ/2)∇E(Y_{k-1}) [+ √ρ·ε]`, returning `Y_1 … Y_K`.
pub fn multistep_denoise<E: Energy + ?Sized>(
    energy: &E,
    y0: &Tensor,
    steps: usize,
    rho: f64,
    langevin: bool,
    seed: u64,
) -> Result<Vec<Tensor>> {
    if steps == 0 {
        return Err(Error::Config("need at least one step".into()));
    }
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {rho}")));
    }
    check_finite("initial iterate", y0)?;
    let mut r = rng::seeded(seed);
    let mut y = y0.detach();
    let mut out = Vec::with_capacity(steps);
    for k in 1..=steps {
        let g = energy.grad(&y, &NoiseLevel::Clean)?.detach();
        y = (&y - (g * (rho / 2.0))?)?;
        if langevin {
            let noise = nn::tensor(&rng::normal_vec(&mut r, y.elem_count()), y.dims())?;
            y = (&y + (noise * rho.sqrt())?)?;
        }
        let norm = nn::to_scalar(&y.sqr()?.sum_all()?)?.sqrt();
        if !(norm <= 1e6) {
            return Err(Error::Diverged { step: k, norm });
        }
        out.push(y.clone());
    }
    Ok(out)
}

/// Fits an energy network alone by DSM on `clean` windows corrupted with
/// isotropic Gaussian noise of standard deviation `noise_std`.
#[derive(Debug, Clone)]
pub struct DsmTrainer {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl DsmTrainer {
    /// `clean` is `[N, …]`. Returns the per-step loss.
    pub fn fit(&self, net: &EnergyNet, store: &ParamStore, clean: &Tensor) -> Result<Vec<f64>> {
        let n = clean.dim(0)?;
        if n == 0 {
            return Err(Error::Data("no windows to fit the energy on".into()));
        }
        let mut r = rng::seeded(self.seed);
        let mut opt = Adam::new(self.lr).with_clip(10.0);
        let mut losses = Vec::with_capacity(self.steps);
        for step in 0..self.steps {
            let idx: Vec<u32> = (0..self.batch).map(|_| r.random_range(0..n) as u32).collect();
            let idx = Tensor::from_vec(idx, self.batch, clean.device())?;
            let y = clean.index_select(&idx, 0)?;
            let noise = nn::tensor(&rng::normal_vec(&mut r, y.elem_count()), y.dims())?;
            let y_hat = (&y + (noise * self.noise_std)?)?;
            let loss = dsm_loss_at(net, &y, &y_hat, &NoiseLevel::Shared(1.0))?;
            let v = nn::to_scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::Training {
                    epoch: 0,
                    batch: step,
                    msg: format!("energy loss {v}"),
                });
            }
            let grads = loss.backward()?;
            opt.step(store, &grads, Some("energy."))?;
            losses.push(v);
        }
        Ok(losses)
    }
}
