//! Minimal layers on top of `candle_core` autodiff.
//!
//! Parameters are created from a seeded `ChaCha8Rng` rather than candle's
//! device RNG so that two runs with the same seed produce identical weights.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, DType, Device, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

pub fn tensor(data: &[f64], shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_slice(data, shape, &device())?)
}

pub fn scalar(v: f64) -> Result<Tensor> {
    Ok(Tensor::new(v, &device())?)
}

pub fn to_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DTYPE)?.to_scalar::<f64>()?)
}

pub fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_vec1::<f64>()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let neg_abs = x.abs()?.neg()?;
    Ok((pos + neg_abs.exp()?.affine(1.0, 1.0)?.log()?)?)
}

/// Fixed sinusoidal features for a scalar position, `width` even.
pub fn sinusoid(pos: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(i as f64) * (10_000f64).ln() / half.max(1) as f64).exp();
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `U(-bound, bound)`
    Uniform(f64),
    Zeros,
    Const(f64),
}

/// Named trainable parameters in deterministic (sorted) order.
#[derive(Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

pub type Snapshot = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
        };
        let var = Var::from_slice(&data, shape, &device())?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place; all layers holding it see the change.
    pub fn set(&self, name: &str, data: &[f64]) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let shape = var.dims().to_vec();
        if data.len() != var.elem_count() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: vec![data.len()],
            });
        }
        var.set(&tensor(data, &shape)?)?;
        Ok(())
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), (v.dims().to_vec(), flat(v.as_tensor())?))))
            .collect()
    }

    pub fn restore(&self, snap: &Snapshot) -> Result<()> {
        if snap.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "snapshot has {} tensors, model has {}",
                snap.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let (shape, data) = snap
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    var.dims()
                )));
            }
            var.set(&tensor(data, shape)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::with_init(store, name, fan_in, fan_out, Init::Uniform(bound), Init::Uniform(bound), rng)
    }

    pub fn with_init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        weight: Init,
        bias: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.create(&format!("{name}.weight"), &[fan_in, fan_out], weight, rng)?,
            bias: store.create(&format!("{name}.bias"), &[fan_out], bias, rng)?,
        })
    }

    /// `x · W + b` over the last axis of a 2-D or 3-D input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match x.dims() {
            [_, _] => Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?),
            [b, t, f] => {
                let y = x.reshape((b * t, *f))?.matmul(&self.weight)?;
                let out = self.weight.dim(1)?;
                Ok(y.broadcast_add(&self.bias)?.reshape((*b, *t, out))?)
            }
            other => Err(Error::ShapeMismatch {
                expected: vec![0, self.weight.dim(0)?],
                actual: other.to_vec(),
            }),
        }
    }
}

/// Single gated recurrent layer, gate order (reset, update, new).
#[derive(Debug, Clone)]
pub struct GruLayer {
    input: Linear,
    hidden: Linear,
    hidden_dim: usize,
}

impl GruLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let u = Init::Uniform(bound);
        Ok(Self {
            input: Linear::with_init(store, &format!("{name}.ih"), in_dim, 3 * hidden_dim, u, u, rng)?,
            hidden: Linear::with_init(store, &format!("{name}.hh"), hidden_dim, 3 * hidden_dim, u, u, rng)?,
            hidden_dim,
        })
    }

    /// `[B, T, in] -> [B, T, H]` from a zero initial state.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, steps, _) = x.dims3()?;
        let h_dim = self.hidden_dim;
        let gates_in = self.input.forward(x)?;
        let mut h = Tensor::zeros((b, h_dim), DTYPE, x.device())?;
        let mut outs = Vec::with_capacity(steps);
        for s in 0..steps {
            let gi = gates_in.narrow(1, s, 1)?.squeeze(1)?;
            let gh = self.hidden.forward(&h)?;
            let r = sigmoid(&(gi.narrow(1, 0, h_dim)? + gh.narrow(1, 0, h_dim)?)?)?;
            let z = sigmoid(&(gi.narrow(1, h_dim, h_dim)? + gh.narrow(1, h_dim, h_dim)?)?)?;
            let n = (gi.narrow(1, 2 * h_dim, h_dim)? + (r * gh.narrow(1, 2 * h_dim, h_dim)?)?)?
                .tanh()?;
            // h' = n + z ⊙ (h - n)
            h = (&n + (z * (&h - &n)?)?)?;
            outs.push(h.unsqueeze(1)?);
        }
        Ok(Tensor::cat(&outs, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct Gru {
    layers: Vec<GruLayer>,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|l| {
                let d = if l == 0 { in_dim } else { hidden_dim };
                GruLayer::new(store, &format!("{name}.l{l}"), d, hidden_dim, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }
}

/// Adam with optional global gradient-norm clipping.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: i32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_clip(mut self, norm: f64) -> Self {
        self.clip_norm = Some(norm);
        self
    }

    /// Global L2 norm of the gradients present for parameters in `store`.
    pub fn grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for (_, var) in store.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                total += to_scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        Ok(total.sqrt())
    }

    /// Applies one update to every parameter of `store` (optionally filtered
    /// by name prefix) that received a gradient. Returns the pre-clip norm.
    pub fn step(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        only_prefix: Option<&str>,
    ) -> Result<f64> {
        self.step_where(store, grads, |name| only_prefix.is_none_or(|p| name.starts_with(p)))
    }

    /// Like [`Adam::step`] but updates only parameters whose name passes `keep`.
    pub fn step_where(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        keep: impl Fn(&str) -> bool,
    ) -> Result<f64> {
        let norm = Self::grad_norm(store, grads)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                detail: format!("global norm {norm}"),
            });
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (name, var) in store.iter() {
            if !keep(name) {
                continue;
            }
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g.detach() * scale)?;
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = (v.affine(1.0 / bc2, 0.0)?.sqrt()? + self.eps)?;
            let update = (m.affine(self.lr / bc1, 0.0)? / denom)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(norm)
    }
}

/// Elementwise `log N(x; mean, exp(log_scale)^2)`.
pub fn gaussian_log_density(x: &Tensor, mean: &Tensor, log_scale: &Tensor) -> Result<Tensor> {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let z = ((x - mean)? / log_scale.exp()?)?;
    Ok(((z.sqr()? * -0.5)? - log_scale)?.affine(1.0, -half_log_2pi)?)
}
