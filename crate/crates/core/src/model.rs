//! Input representation and the bidirectional (ladder) VAE that produces a
//! Gaussian over the target window.
//!
//! Encoder: `X → [GRU(E(X)) ‖ E(X)] → stem → e_0 → e_1 … e_n` (residual blocks).
//! Decoder (top-down): block `i` reads `s_i + e_{n-i}`, emits the posterior of
//! `z_{i+1}`, and accumulates `s_{i+1} = s_i + g_i(z_{i+1})`. The output head
//! reads `s_n`. Each decoder block therefore receives the matching encoder
//! block's features through an additive skip.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoise::{EnergyConfig, EnergyNet};
use crate::error::{Error, Result};
use crate::nn::{self, Gru, Linear, ParamStore, DTYPE};
use crate::rng;
use crate::schedule::{Chain, DiffusionSchedule};

pub const LOG_SCALE_MIN: f64 = -7.0;
pub const LOG_SCALE_MAX: f64 = 2.0;

/// How the level of an input window is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelMode {
    /// Windows are fed as they are.
    #[default]
    Absolute,
    /// Each input window is centred on its per-dimension mean before
    /// encoding; the target dimensions' means are added back to the forecast
    /// and the energy network works relative to them.
    WindowMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub rnn_hidden: usize,
    pub rnn_layers: usize,
    /// Width of the BVAE residual blocks.
    pub hidden: usize,
    /// Number of latent variables `n` (one per residual block).
    pub blocks: usize,
    /// Factors per latent variable `m`.
    pub factors: usize,
    pub energy: EnergyConfig,
    #[serde(default)]
    pub level: LevelMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            rnn_hidden: 128,
            rnn_layers: 2,
            hidden: 128,
            blocks: 2,
            factors: 4,
            energy: EnergyConfig::default(),
            level: LevelMode::Absolute,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("need at least one latent block".into()));
        }
        if self.factors < 2 {
            return Err(Error::Config("need at least two factors per latent".into()));
        }
        if self.embed_dim == 0 || self.rnn_hidden == 0 || self.rnn_layers == 0 || self.hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        self.energy.validate()
    }
}

/// Window geometry the model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub l_x: usize,
    pub l_y: usize,
    pub in_dims: usize,
    pub out_dims: usize,
}

/// `CONCAT(GRU(E(X)), E(X))` with `E` a linear value embedding plus fixed
/// sinusoidal positions.
#[derive(Debug, Clone)]
pub struct InputRepr {
    value_embed: Linear,
    positions: Tensor,
    gru: Gru,
    pub out_dim: usize,
}

impl InputRepr {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        shape: &ModelShape,
        rng: &mut R,
    ) -> Result<Self> {
        let value_embed = Linear::new(store, "repr.embed", shape.in_dims, cfg.embed_dim, rng)?;
        let pos: Vec<f64> = (0..shape.l_x)
            .flat_map(|p| nn::sinusoid(p as f64, cfg.embed_dim))
            .collect();
        let positions = nn::tensor(&pos, &[1, shape.l_x, cfg.embed_dim])?;
        let gru = Gru::new(store, "repr.gru", cfg.embed_dim, cfg.rnn_hidden, cfg.rnn_layers, rng)?;
        Ok(Self {
            value_embed,
            positions,
            gru,
            out_dim: cfg.rnn_hidden + cfg.embed_dim,
        })
    }

    /// `[B, l_x, d] -> [B, l_x, rnn_hidden + embed_dim]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let emb = self.value_embed.forward(x)?.broadcast_add(&self.positions)?;
        let rec = self.gru.forward(&emb)?;
        Ok(Tensor::cat(&[&rec, &emb], D::Minus1)?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    inner: Linear,
    outer: Linear,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.inner"), in_dim, width, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), width, width, rng)?,
        })
    }

    fn branch(&self, x: &Tensor) -> Result<Tensor> {
        self.outer.forward(&self.inner.forward(x)?.tanh()?)
    }
}

/// Posterior parameters and reparameterized draws for `z_1 … z_n`, each `[B, m]`.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub samples: Vec<Tensor>,
    pub means: Vec<Tensor>,
    pub log_scales: Vec<Tensor>,
}

impl LatentState {
    /// Builds `z = μ + exp(log σ)·ε` from explicit parameters and noise.
    pub fn from_params(means: Vec<Tensor>, log_scales: Vec<Tensor>, eps: &[Tensor]) -> Result<Self> {
        if means.len() != log_scales.len() || means.len() != eps.len() {
            return Err(Error::Config("latent parameter lists differ in length".into()));
        }
        let samples = means
            .iter()
            .zip(&log_scales)
            .zip(eps)
            .map(|((m, s), e)| Ok((m + (s.exp()? * e)?)?))
            .collect::<Result<_>>()?;
        Ok(Self {
            samples,
            means,
            log_scales,
        })
    }

    pub fn num_variables(&self) -> usize {
        self.samples.len()
    }

    pub fn factors(&self) -> Result<usize> {
        Ok(self.samples[0].dim(1)?)
    }

    pub fn batch(&self) -> Result<usize> {
        Ok(self.samples[0].dim(0)?)
    }

    /// Mean over batch of `Σ_i KL(q(z_i|x) ‖ N(0, I))`, a diagnostic only.
    pub fn kl_to_standard_normal(&self) -> Result<f64> {
        let mut total = 0.0;
        for (m, s) in self.means.iter().zip(&self.log_scales) {
            let zero = m.zeros_like()?;
            let kl = gaussian_kl(m, s, &zero, &zero)?.sum(D::Minus1)?.mean_all()?;
            total += nn::to_scalar(&kl)?;
        }
        Ok(total)
    }

    /// Stacks samples into `[B, n, m]`.
    pub fn stacked_samples(&self) -> Result<Tensor> {
        Ok(Tensor::stack(&self.samples, 1)?)
    }

    pub fn stacked_means(&self) -> Result<Tensor> {
        Ok(Tensor::stack(&self.means, 1)?)
    }

    pub fn stacked_log_scales(&self) -> Result<Tensor> {
        Ok(Tensor::stack(&self.log_scales, 1)?)
    }
}

/// Diagonal Gaussian over the target window, each `[B, l_y, d']`.
#[derive(Debug, Clone)]
pub struct GenerativeOutput {
    pub mean: Tensor,
    pub log_scale: Tensor,
}

impl GenerativeOutput {
    pub fn sample_with(&self, eps: &Tensor) -> Result<Tensor> {
        Ok((&self.mean + (self.log_scale.exp()? * eps)?)?)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Tensor> {
        let eps = normal_like(&self.mean, rng)?;
        self.sample_with(&eps)
    }

    /// Moves the mean by a per-window level `[B, 1, d']`.
    pub fn shifted(self, level: Option<&Tensor>) -> Result<Self> {
        Ok(match level {
            Some(l) => Self {
                mean: self.mean.broadcast_add(l)?,
                log_scale: self.log_scale,
            },
            None => self,
        })
    }
}

/// `y - level`, or `y` itself when there is no level.
pub fn relative(y: &Tensor, level: Option<&Tensor>) -> Result<Tensor> {
    Ok(match level {
        Some(l) => y.broadcast_sub(l)?,
        None => y.clone(),
    })
}

pub fn normal_like<R: Rng + ?Sized>(t: &Tensor, rng: &mut R) -> Result<Tensor> {
    let v = rng::normal_vec(rng, t.elem_count());
    nn::tensor(&v, t.dims())
}

/// Deterministic encoder features: `[e_0, …, e_n]`, each `[B, hidden]`.
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    pub levels: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Bvae {
    repr: InputRepr,
    stem: Linear,
    enc_blocks: Vec<ResBlock>,
    post_heads: Vec<Linear>,
    dec_blocks: Vec<ResBlock>,
    out_head: Linear,
    hidden: usize,
    factors: usize,
    shape: ModelShape,
}

impl Bvae {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        shape: ModelShape,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let repr = InputRepr::new(store, cfg, &shape, rng)?;
        let stem = Linear::new(store, "bvae.stem", shape.l_x * repr.out_dim, cfg.hidden, rng)?;
        let mut enc_blocks = Vec::new();
        let mut post_heads = Vec::new();
        let mut dec_blocks = Vec::new();
        for i in 0..cfg.blocks {
            enc_blocks.push(ResBlock::new(store, &format!("bvae.enc{i}"), cfg.hidden, cfg.hidden, rng)?);
        }
        for i in 0..cfg.blocks {
            post_heads.push(Linear::new(store, &format!("bvae.post{i}"), cfg.hidden, 2 * cfg.factors, rng)?);
            dec_blocks.push(ResBlock::new(store, &format!("bvae.dec{i}"), cfg.factors, cfg.hidden, rng)?);
        }
        let out_head = Linear::new(store, "bvae.out", cfg.hidden, 2 * shape.l_y * shape.out_dims, rng)?;
        Ok(Self {
            repr,
            stem,
            enc_blocks,
            post_heads,
            dec_blocks,
            out_head,
            hidden: cfg.hidden,
            factors: cfg.factors,
            shape,
        })
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn blocks(&self) -> usize {
        self.enc_blocks.len()
    }

    pub fn factors(&self) -> usize {
        self.factors
    }

    pub fn features(&self, x: &Tensor) -> Result<EncoderFeatures> {
        let (b, lx, d) = x.dims3()?;
        if lx != self.shape.l_x || d != self.shape.in_dims {
            return Err(Error::ShapeMismatch {
                expected: vec![b, self.shape.l_x, self.shape.in_dims],
                actual: vec![b, lx, d],
            });
        }
        let rep = self.repr.forward(x)?.flatten_from(1)?;
        let mut e = self.stem.forward(&rep)?.elu(1.0)?;
        let mut levels = vec![e.clone()];
        for block in &self.enc_blocks {
            e = (&e + block.branch(&e)?)?;
            levels.push(e.clone());
        }
        Ok(EncoderFeatures { levels })
    }

    /// Hierarchical posterior sampling with the supplied noise (`n` tensors of `[B, m]`).
    pub fn posterior(&self, feats: &EncoderFeatures, eps: &[Tensor]) -> Result<LatentState> {
        let n = self.blocks();
        if eps.len() != n {
            return Err(Error::Config(format!("expected {n} noise tensors, got {}", eps.len())));
        }
        let b = feats.levels[0].dim(0)?;
        let mut state = Tensor::zeros((b, self.hidden), DTYPE, &nn::device())?;
        let (mut samples, mut means, mut log_scales) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            let ctx = (&state + &feats.levels[n - i])?;
            let params = self.post_heads[i].forward(&ctx)?;
            let mean = params.narrow(1, 0, self.factors)?;
            let log_scale = params
                .narrow(1, self.factors, self.factors)?
                .clamp(LOG_SCALE_MIN, LOG_SCALE_MAX)?;
            let z = (&mean + (log_scale.exp()? * &eps[i])?)?;
            state = (&state + self.dec_blocks[i].branch(&z)?)?;
            samples.push(z);
            means.push(mean);
            log_scales.push(log_scale);
        }
        Ok(LatentState {
            samples,
            means,
            log_scales,
        })
    }

    pub fn draw_eps<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<Tensor>> {
        (0..self.blocks())
            .map(|_| nn::tensor(&rng::normal_vec(rng, batch * self.factors), &[batch, self.factors]))
            .collect()
    }

    /// `Z ~ q(Z | X)` for `x` shaped `[B, l_x, d]`.
    pub fn encode<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<LatentState> {
        let feats = self.features(x)?;
        let eps = self.draw_eps(x.dim(0)?, rng)?;
        self.posterior(&feats, &eps)
    }

    pub fn decode(&self, z: &LatentState) -> Result<GenerativeOutput> {
        if z.num_variables() != self.blocks() {
            return Err(Error::Config(format!(
                "latent has {} variables, decoder expects {}",
                z.num_variables(),
                self.blocks()
            )));
        }
        let b = z.batch()?;
        let mut state = Tensor::zeros((b, self.hidden), DTYPE, &nn::device())?;
        for (i, zi) in z.samples.iter().enumerate() {
            if zi.dim(1)? != self.factors {
                return Err(Error::ShapeMismatch {
                    expected: vec![b, self.factors],
                    actual: zi.dims().to_vec(),
                });
            }
            state = (&state + self.dec_blocks[i].branch(zi)?)?;
        }
        let out = self.out_head.forward(&state)?;
        let k = self.shape.l_y * self.shape.out_dims;
        let target = (b, self.shape.l_y, self.shape.out_dims);
        let mean = out.narrow(1, 0, k)?.reshape(target)?;
        let log_scale = out
            .narrow(1, k, k)?
            .clamp(LOG_SCALE_MIN, LOG_SCALE_MAX)?
            .reshape(target)?;
        Ok(GenerativeOutput { mean, log_scale })
    }

    /// Parameter names of the final posterior projections.
    pub fn posterior_head_names(&self) -> Vec<String> {
        (0..self.blocks())
            .flat_map(|i| [format!("bvae.post{i}.weight"), format!("bvae.post{i}.bias")])
            .collect()
    }
}

/// Elementwise `KL(N(μ_q, σ_q²) ‖ N(μ_p, σ_p²))` in log-scale parameterization.
pub fn gaussian_kl(mu_q: &Tensor, ls_q: &Tensor, mu_p: &Tensor, ls_p: &Tensor) -> Result<Tensor> {
    let var_q = (ls_q * 2.0)?.exp()?;
    let var_p = (ls_p * 2.0)?.exp()?;
    let diff2 = (mu_q - mu_p)?.sqr()?;
    let ratio = ((var_q + diff2)? / (var_p * 2.0)?)?;
    Ok(((ls_p - ls_q)? + ratio)?.affine(1.0, -0.5)?)
}

/// Closed-form marginal `q(Y^(t))` of the diffused target.
#[derive(Debug, Clone)]
pub struct TargetMarginal {
    pub mean: Tensor,
    pub log_scale: Tensor,
}

impl TargetMarginal {
    /// Mean `sqrt(ᾱ′_t)·Y`, standard deviation equal to the target chain's
    /// noise coefficient, floored at `exp(LOG_SCALE_MIN)`.
    pub fn diffused(y_clean: &Tensor, schedule: &DiffusionSchedule, t: usize) -> Result<Self> {
        let (signal, noise) = schedule.coefficients(t, Chain::Target)?;
        Self::with_params(y_clean, signal, noise)
    }

    /// Undiffused target: a point mass softened to the log-scale floor.
    pub fn clean(y_clean: &Tensor) -> Result<Self> {
        Self::with_params(y_clean, 1.0, 0.0)
    }

    fn with_params(y: &Tensor, signal: f64, std: f64) -> Result<Self> {
        let ls = std.max(LOG_SCALE_MIN.exp()).ln();
        Ok(Self {
            mean: (y * signal)?,
            log_scale: y.ones_like()?.affine(ls, 0.0)?,
        })
    }

    /// Per-sample steps, one row of `y_clean` each.
    pub fn diffused_per_sample(
        y_clean: &Tensor,
        schedule: &DiffusionSchedule,
        steps: &[usize],
    ) -> Result<Self> {
        let b = y_clean.dim(0)?;
        let rest: usize = y_clean.dims()[1..].iter().product();
        let mut sig = Vec::with_capacity(b * rest);
        let mut ls = Vec::with_capacity(b * rest);
        for &t in steps {
            let (s, n) = schedule.coefficients(t, Chain::Target)?;
            sig.extend(std::iter::repeat_n(s, rest));
            ls.extend(std::iter::repeat_n(n.max(LOG_SCALE_MIN.exp()).ln(), rest));
        }
        Ok(Self {
            mean: (y_clean * nn::tensor(&sig, y_clean.dims())?)?,
            log_scale: nn::tensor(&ls, y_clean.dims())?,
        })
    }
}

/// Mean over batch and entries of `KL(q(Y^(t)) ‖ p_θ(Ŷ^(t)))`.
pub fn kl_target(gen: &GenerativeOutput, q: &TargetMarginal) -> Result<Tensor> {
    if gen.mean.dims() != q.mean.dims() {
        return Err(Error::ShapeMismatch {
            expected: q.mean.dims().to_vec(),
            actual: gen.mean.dims().to_vec(),
        });
    }
    Ok(gaussian_kl(&q.mean, &q.log_scale, &gen.mean, &gen.log_scale)?.mean_all()?)
}

/// The BVAE plus the optional energy network sharing one parameter store.
#[derive(Debug)]
pub struct ForecastModel {
    pub store: ParamStore,
    pub bvae: Bvae,
    pub energy: Option<EnergyNet>,
    pub config: ModelConfig,
    /// Input columns forecast by the model, in output order.
    pub target_dims: Vec<usize>,
}

impl ForecastModel {
    pub fn new(cfg: &ModelConfig, shape: ModelShape, with_energy: bool, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = rng::seeded(seed);
        let bvae = Bvae::new(&mut store, cfg, shape, &mut rng)?;
        let energy = if with_energy {
            Some(EnergyNet::new(&mut store, &cfg.energy, shape.l_y * shape.out_dims, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            store,
            bvae,
            energy,
            config: cfg.clone(),
            target_dims: (shape.in_dims - shape.out_dims.min(shape.in_dims)..shape.in_dims).collect(),
        })
    }

    /// Sets which input columns the outputs correspond to (default: the last `d'`).
    pub fn with_target_dims(mut self, dims: Vec<usize>) -> Result<Self> {
        let shape = self.shape();
        if dims.len() != shape.out_dims || dims.iter().any(|&j| j >= shape.in_dims) {
            return Err(Error::Config(format!(
                "target dims {dims:?} do not fit {} inputs and {} outputs",
                shape.in_dims, shape.out_dims
            )));
        }
        self.target_dims = dims;
        Ok(self)
    }

    pub fn shape(&self) -> ModelShape {
        self.bvae.shape()
    }

    /// Returns the encoder input for `x` (`[B, l_x, d]`) and, under
    /// [`LevelMode::WindowMean`], the level `[B, 1, d']` of the target dims.
    pub fn center(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        match self.config.level {
            LevelMode::Absolute => Ok((x.clone(), None)),
            LevelMode::WindowMean => {
                let m = x.mean_keepdim(1)?;
                let idx: Vec<u32> = self.target_dims.iter().map(|&j| j as u32).collect();
                let idx = Tensor::new(idx.as_slice(), &nn::device())?;
                let level = m.index_select(&idx, 2)?;
                Ok((x.broadcast_sub(&m)?, Some(level)))
            }
        }
    }

    /// Zeroes the posterior heads so every `q(z_i | ·)` is the standard normal.
    pub fn zero_posterior_heads(&self) -> Result<()> {
        for name in self.bvae.posterior_head_names() {
            let n = self
                .store
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing {name}")))?
                .elem_count();
            self.store.set(&name, &vec![0.0; n])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            level: LevelMode::Absolute,
            embed_dim: 8,
            rnn_hidden: 12,
            rnn_layers: 2,
            hidden: 16,
            blocks: 2,
            factors: 4,
            energy: EnergyConfig {
                hidden: 16,
                ..EnergyConfig::default()
            },
        }
    }

    fn shape() -> ModelShape {
        ModelShape {
            l_x: 8,
            l_y: 8,
            in_dims: 3,
            out_dims: 1,
        }
    }

    fn input(b: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        nn::tensor(&rng::normal_vec(&mut r, b * 8 * 3), &[b, 8, 3]).unwrap()
    }

    #[test]
    fn repr_width_is_hidden_plus_embedding() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(0);
        let repr = InputRepr::new(&mut store, &small_cfg(), &shape(), &mut r).unwrap();
        let out = repr.forward(&input(2, 1)).unwrap();
        assert_eq!(out.dims(), &[2, 8, 12 + 8]);
    }

    #[test]
    fn latent_and_output_shapes() {
        let m = ForecastModel::new(&small_cfg(), shape(), true, 0).unwrap();
        let mut r = rng::seeded(3);
        let z = m.bvae.encode(&input(5, 2), &mut r).unwrap();
        assert_eq!(z.num_variables(), 2);
        assert_eq!(z.samples[0].dims(), &[5, 4]);
        let out = m.bvae.decode(&z).unwrap();
        assert_eq!(out.mean.dims(), &[5, 8, 1]);
        assert_eq!(out.log_scale.dims(), &[5, 8, 1]);
    }

    #[test]
    fn encode_is_deterministic_given_seed() {
        let m = ForecastModel::new(&small_cfg(), shape(), false, 4).unwrap();
        let x = input(3, 9);
        let a = m.bvae.encode(&x, &mut rng::seeded(1)).unwrap();
        let b = m.bvae.encode(&x, &mut rng::seeded(1)).unwrap();
        for (p, q) in a.means.iter().zip(&b.means) {
            assert_eq!(nn::flat(p).unwrap(), nn::flat(q).unwrap());
        }
    }

    #[test]
    fn zero_heads_give_prior_posteriors() {
        let m = ForecastModel::new(&small_cfg(), shape(), false, 4).unwrap();
        m.zero_posterior_heads().unwrap();
        let z = m.bvae.encode(&input(4, 2), &mut rng::seeded(0)).unwrap();
        for (mu, ls) in z.means.iter().zip(&z.log_scales) {
            assert!(nn::flat(mu).unwrap().iter().all(|v| *v == 0.0));
            assert!(nn::flat(ls).unwrap().iter().all(|v| *v == 0.0));
        }
        assert_eq!(z.kl_to_standard_normal().unwrap(), 0.0);
    }

    #[test]
    fn decoder_rejects_wrong_architecture() {
        let m = ForecastModel::new(&small_cfg(), shape(), false, 0).unwrap();
        let mut r = rng::seeded(0);
        let mut z = m.bvae.encode(&input(2, 0), &mut r).unwrap();
        z.samples.pop();
        assert!(m.bvae.decode(&z).is_err());
        assert!(m.bvae.features(&nn::tensor(&[0.0; 12], &[1, 4, 3]).unwrap()).is_err());
    }

    #[test]
    fn log_scale_clamp_on_random_inputs() {
        let m = ForecastModel::new(&small_cfg(), shape(), false, 0).unwrap();
        let mut r = rng::seeded(77);
        for trial in 0..1000 {
            let scale = if trial % 10 == 0 { 1e3 } else { 3.0 };
            let x = nn::tensor(
                &rng::normal_vec(&mut r, 8 * 3).iter().map(|v| v * scale).collect::<Vec<_>>(),
                &[1, 8, 3],
            )
            .unwrap();
            let z = m.bvae.encode(&x, &mut r).unwrap();
            let out = m.bvae.decode(&z).unwrap();
            for v in nn::flat(&out.log_scale).unwrap() {
                assert!((LOG_SCALE_MIN..=LOG_SCALE_MAX).contains(&v));
            }
        }
    }

    #[test]
    fn kl_identical_and_shifted() {
        let y = nn::tensor(&[0.5, -1.0, 2.0], &[1, 3, 1]).unwrap();
        let zero = y.zeros_like().unwrap();
        let kl = gaussian_kl(&y, &zero, &y, &zero).unwrap();
        assert!(nn::flat(&kl).unwrap().iter().all(|v| v.abs() < 1e-15));
        let delta = 0.7;
        let shifted = (&y + delta).unwrap();
        let kl = gaussian_kl(&y, &zero, &shifted, &zero).unwrap();
        for v in nn::flat(&kl).unwrap() {
            assert_abs_diff_eq!(v, delta * delta / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn kl_target_zero_when_decoder_matches_marginal() {
        let s = DiffusionSchedule::new(0.0, 0.1, 10, 0.5).unwrap();
        let y = nn::tensor(&[0.3, -0.2, 1.1, 0.0], &[2, 2, 1]).unwrap();
        let q = TargetMarginal::diffused(&y, &s, 7).unwrap();
        let gen = GenerativeOutput {
            mean: q.mean.clone(),
            log_scale: q.log_scale.clone(),
        };
        assert!(nn::to_scalar(&kl_target(&gen, &q).unwrap()).unwrap().abs() < 1e-12);
        let per = TargetMarginal::diffused_per_sample(&y, &s, &[7, 7]).unwrap();
        assert_eq!(nn::flat(&per.mean).unwrap(), nn::flat(&q.mean).unwrap());
        assert_eq!(nn::flat(&per.log_scale).unwrap(), nn::flat(&q.log_scale).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kl_nonnegative_and_zero_iff_equal(
                mq in -3.0f64..3.0, lq in -3.0f64..1.5,
                mp in -3.0f64..3.0, lp in -3.0f64..1.5,
            ) {
                let t = |v: f64| nn::tensor(&[v], &[1]).unwrap();
                let kl = nn::to_scalar(&gaussian_kl(&t(mq), &t(lq), &t(mp), &t(lp)).unwrap().sum_all().unwrap()).unwrap();
                prop_assert!(kl >= -1e-12);
                let same = nn::to_scalar(&gaussian_kl(&t(mq), &t(lq), &t(mq), &t(lq)).unwrap().sum_all().unwrap()).unwrap();
                prop_assert!(same.abs() < 1e-9);
                if (mq - mp).abs() > 1e-3 || (lq - lp).abs() > 1e-3 {
                    prop_assert!(kl > 1e-9);
                }
            }
        }
    }
}
