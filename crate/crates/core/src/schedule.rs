//! Variance schedules and the coupled forward diffusion of input and target windows.
//!
//! Step indices are 1-based throughout (`t ∈ 1..=T`); the arrays are stored
//! 0-based so `alpha_bar[t - 1]` is ᾱ_t.

use candle_core::Tensor;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Coefficient applied to the standard-normal noise when diffusing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseCoeff {
    /// `(1 - ᾱ_t)`, the form used by the coupled-diffusion training procedure.
    #[default]
    Linear,
    /// `sqrt(1 - ᾱ_t)`, the usual DDPM marginal.
    Sqrt,
}

impl NoiseCoeff {
    pub fn apply(self, alpha_bar: f64) -> f64 {
        match self {
            NoiseCoeff::Linear => 1.0 - alpha_bar,
            NoiseCoeff::Sqrt => (1.0 - alpha_bar).max(0.0).sqrt(),
        }
    }
}

/// Which of the two coupled chains to read coefficients from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Chain {
    Input,
    Target,
}

/// Plain key-value form of a schedule as it appears in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub omega: f64,
    #[serde(default)]
    pub noise_coeff: NoiseCoeff,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            beta_start: 0.0,
            beta_end: 0.01,
            steps: 1000,
            omega: 0.1,
            noise_coeff: NoiseCoeff::Linear,
        }
    }
}

impl ScheduleParams {
    /// Per-dataset schedule presets. Unknown names fall back to the default.
    pub fn preset(dataset: &str) -> Self {
        let (beta_end, steps) = match dataset.to_ascii_lowercase().as_str() {
            "weather" => (0.1, 100),
            "etth1" => (0.1, 1000),
            "wind" => (0.08, 1000),
            _ => (0.01, 1000),
        };
        Self {
            beta_end,
            steps,
            ..Self::default()
        }
    }

    pub fn build(&self) -> Result<DiffusionSchedule> {
        let mut s = DiffusionSchedule::new(self.beta_start, self.beta_end, self.steps, self.omega)?;
        s.noise_coeff = self.noise_coeff;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub omega: f64,
    pub alpha_bar: Vec<f64>,
    pub alpha_bar_prime: Vec<f64>,
    /// Noise-level weights `σ_t = 1 - ᾱ_t` used by the multiscale DSM loss.
    pub sigma: Vec<f64>,
    pub noise_coeff: NoiseCoeff,
}

impl DiffusionSchedule {
    /// Linearly spaced β from `beta_start` to `beta_end` over `steps` steps.
    pub fn new(beta_start: f64, beta_end: f64, steps: usize, omega: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("T must be at least 1".into()));
        }
        if !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::Schedule("beta endpoints must be finite".into()));
        }
        if beta_end >= 1.0 {
            return Err(Error::Schedule(format!(
                "beta_end = {beta_end} >= 1 makes the chain diverge"
            )));
        }
        if beta_start < 0.0 || beta_start > beta_end {
            return Err(Error::Schedule(format!(
                "need 0 <= beta_start <= beta_end, got {beta_start} and {beta_end}"
            )));
        }
        if !(omega > 0.0 && omega < 1.0) {
            return Err(Error::Schedule(format!("omega = {omega} outside (0, 1)")));
        }

        let beta: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };

        let mut alpha_bar = Vec::with_capacity(steps);
        let mut alpha_bar_prime = Vec::with_capacity(steps);
        let (mut acc, mut acc_prime) = (1.0, 1.0);
        for &b in &beta {
            acc *= 1.0 - b;
            acc_prime *= 1.0 - omega * b;
            alpha_bar.push(acc);
            alpha_bar_prime.push(acc_prime);
        }
        let sigma = alpha_bar.iter().map(|a| 1.0 - a).collect();

        Ok(Self {
            steps,
            beta,
            omega,
            alpha_bar,
            alpha_bar_prime,
            sigma,
            noise_coeff: NoiseCoeff::Linear,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            beta_start: self.beta[0],
            beta_end: *self.beta.last().expect("non-empty schedule"),
            steps: self.steps,
            omega: self.omega,
            noise_coeff: self.noise_coeff,
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            Err(Error::StepOutOfRange { t, max: self.steps })
        } else {
            Ok(())
        }
    }

    pub fn chain(&self, chain: Chain) -> &[f64] {
        match chain {
            Chain::Input => &self.alpha_bar,
            Chain::Target => &self.alpha_bar_prime,
        }
    }

    pub fn sigma_at(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.sigma[t - 1])
    }

    /// `(signal, noise)` multipliers for step `t` on the given chain.
    pub fn coefficients(&self, t: usize, chain: Chain) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let ab = self.chain(chain)[t - 1];
        Ok((ab.sqrt(), self.noise_coeff.apply(ab)))
    }

    /// Uniform draw from `1..=T`.
    pub fn sample_step<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(1..=self.steps)
    }

    pub fn diffuse(
        &self,
        series: &Array2<f64>,
        t: usize,
        chain: Chain,
        noise: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        diffuse_with(series, t, self.chain(chain), noise, self.noise_coeff)
    }

    /// Batched tensor form used by the training loop.
    pub fn diffuse_tensor(
        &self,
        series: &Tensor,
        t: usize,
        chain: Chain,
        noise: &Tensor,
    ) -> Result<Tensor> {
        if series.dims() != noise.dims() {
            return Err(Error::ShapeMismatch {
                expected: series.dims().to_vec(),
                actual: noise.dims().to_vec(),
            });
        }
        let (signal, noise_c) = self.coefficients(t, chain)?;
        Ok(((series * signal)? + (noise * noise_c)?)?)
    }
}

/// `sqrt(ᾱ_t)·series + (1 - ᾱ_t)·noise` for `ᾱ_t = alpha_bar_chain[t - 1]`.
pub fn diffuse(
    series: &Array2<f64>,
    t: usize,
    alpha_bar_chain: &[f64],
    noise: &Array2<f64>,
) -> Result<Array2<f64>> {
    diffuse_with(series, t, alpha_bar_chain, noise, NoiseCoeff::Linear)
}

pub fn diffuse_with(
    series: &Array2<f64>,
    t: usize,
    alpha_bar_chain: &[f64],
    noise: &Array2<f64>,
    coeff: NoiseCoeff,
) -> Result<Array2<f64>> {
    if series.dim() != noise.dim() {
        return Err(Error::ShapeMismatch {
            expected: series.shape().to_vec(),
            actual: noise.shape().to_vec(),
        });
    }
    if t == 0 || t > alpha_bar_chain.len() {
        return Err(Error::StepOutOfRange {
            t,
            max: alpha_bar_chain.len(),
        });
    }
    let ab = alpha_bar_chain[t - 1];
    let (signal, noise_c) = (ab.sqrt(), coeff.apply(ab));
    Ok(series * signal + noise * noise_c)
}

/// Diffuses an input/target pair at the same step with independent noise:
/// the input on the ᾱ chain, the target on the ω-scaled ᾱ′ chain.
pub fn coupled_diffuse(
    x: &Array2<f64>,
    y: &Array2<f64>,
    t: usize,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut rng = rng::seeded(seed);
    coupled_diffuse_rng(x, y, t, schedule, &mut rng)
}

pub fn coupled_diffuse_rng<R: Rng + ?Sized>(
    x: &Array2<f64>,
    y: &Array2<f64>,
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<f64>)> {
    schedule.check_step(t)?;
    let noise_x = rng::normal_array(rng, x.dim());
    let noise_y = rng::normal_array(rng, y.dim());
    let xd = schedule.diffuse(x, t, Chain::Input, &noise_x)?;
    let yd = schedule.diffuse(y, t, Chain::Target, &noise_y)?;
    Ok((xd, yd))
}
