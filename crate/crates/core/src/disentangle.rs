//! Total correlation penalty, the factor-index discriminator probe and MIG.

use candle_core::{Tensor, D};
use ndarray::{Array2, Array3, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LatentState;
use crate::nn::{self, Adam, Linear, ParamStore};
use crate::rng;

/// Latent draws and their per-sample Gaussian posteriors, each `[B, n, m]`.
#[derive(Debug, Clone)]
pub struct FactorBatch {
    pub samples: Tensor,
    pub means: Tensor,
    pub log_scales: Tensor,
}

impl FactorBatch {
    pub fn new(samples: Tensor, means: Tensor, log_scales: Tensor) -> Result<Self> {
        let dims = samples.dims().to_vec();
        if dims.len() != 3 || means.dims() != dims.as_slice() || log_scales.dims() != dims.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: dims,
                actual: means.dims().to_vec(),
            });
        }
        if dims[2] < 2 {
            return Err(Error::Config("need at least two factors per latent".into()));
        }
        Ok(Self {
            samples,
            means,
            log_scales,
        })
    }

    pub fn from_state(z: &LatentState) -> Result<Self> {
        Self::new(z.stacked_samples()?, z.stacked_means()?, z.stacked_log_scales()?)
    }
}

fn log_sum_exp(x: &Tensor, dim: usize) -> Result<Tensor> {
    let m = x.max_keepdim(dim)?.detach();
    let s = x.broadcast_sub(&m)?.exp()?.sum_keepdim(dim)?.log()?;
    Ok((s + m)?.squeeze(dim)?)
}

/// `TC(z) = E[log q(z) − Σ_j log q(z_j)]` for one `[B, m]` variable, using
/// the minibatch as the aggregate posterior (dataset size equal to batch size).
fn tc_single(z: &Tensor, mu: &Tensor, ls: &Tensor) -> Result<Tensor> {
    let b = z.dim(0)?;
    // [B, 1, m] against [1, B, m] -> [B, B, m]
    let z = z.unsqueeze(1)?;
    let mu = mu.unsqueeze(0)?;
    let ls = ls.unsqueeze(0)?;
    let std = ls.exp()?;
    let zn = z.broadcast_sub(&mu)?.broadcast_div(&std)?;
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let log_q = (zn.sqr()? * -0.5)?.broadcast_sub(&ls)?.affine(1.0, -half_log_2pi)?;
    let log_b = (b as f64).ln();
    let joint = log_sum_exp(&log_q.sum(D::Minus1)?, 1)?.affine(1.0, -log_b)?;
    let marginals = log_sum_exp(&log_q, 1)?.affine(1.0, -log_b)?.sum(D::Minus1)?;
    Ok((joint - marginals)?.mean_all()?)
}

/// `(1/n) Σ_i TC(z_i)`.
pub fn tc_loss(batch: &FactorBatch) -> Result<Tensor> {
    let (b, n, _) = batch.samples.dims3()?;
    if b < 2 {
        return Err(Error::Config("total correlation needs a batch of at least 2".into()));
    }
    let mut total: Option<Tensor> = None;
    for i in 0..n {
        let pick = |t: &Tensor| -> Result<Tensor> { Ok(t.narrow(1, i, 1)?.squeeze(1)?) };
        let tc = tc_single(
            &pick(&batch.samples)?,
            &pick(&batch.means)?,
            &pick(&batch.log_scales)?,
        )?;
        total = Some(match total {
            Some(acc) => (acc + tc)?,
            None => tc,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no latent variables".into()))?;
    Ok((total / n as f64)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub layers: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Append a one-hot of the variable index `i` to the scalar input.
    pub condition_on_variable: bool,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: 100,
            epochs: 20,
            batch: 256,
            lr: 1e-3,
            condition_on_variable: true,
            seed: 0,
        }
    }
}

/// Regresses each factor value `z_{i,j}` onto its index `j ∈ 1..=m`.
/// `latents` is `[N, n, m]`; returns the mean squared error of every epoch.
pub fn train_discriminator(latents: &Array3<f64>, cfg: &DiscriminatorConfig) -> Result<Vec<f64>> {
    let (count, n, m) = latents.dim();
    if count == 0 || n == 0 || m == 0 {
        return Err(Error::Data("no captured latents to train the discriminator on".into()));
    }
    if latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "latents".into(),
            detail: "captured latents contain non-finite values".into(),
        });
    }
    if cfg.layers == 0 || cfg.hidden == 0 || cfg.batch == 0 {
        return Err(Error::Config("discriminator widths must be positive".into()));
    }
    let in_dim = if cfg.condition_on_variable { 1 + n } else { 1 };
    let mut rows = Vec::with_capacity(count * n * m);
    for s in 0..count {
        for i in 0..n {
            for j in 0..m {
                rows.push((latents[[s, i, j]], i, (j + 1) as f64));
            }
        }
    }

    let mut r = rng::seeded(cfg.seed);
    let mut store = ParamStore::new();
    let mut layers = Vec::with_capacity(cfg.layers + 1);
    let mut width = in_dim;
    for l in 0..cfg.layers {
        layers.push(Linear::new(&mut store, &format!("disc.l{l}"), width, cfg.hidden, &mut r)?);
        width = cfg.hidden;
    }
    layers.push(Linear::new(&mut store, "disc.out", width, 1, &mut r)?);
    let mut opt = Adam::new(cfg.lr);

    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let (mut sum, mut seen) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            let mut x = Vec::with_capacity(chunk.len() * in_dim);
            let mut y = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let (z, i, label) = rows[k];
                x.push(z);
                if cfg.condition_on_variable {
                    x.extend((0..n).map(|q| if q == i { 1.0 } else { 0.0 }));
                }
                y.push(label);
            }
            let mut h = nn::tensor(&x, &[chunk.len(), in_dim])?;
            for (l, layer) in layers.iter().enumerate() {
                h = layer.forward(&h)?;
                if l + 1 < layers.len() {
                    h = h.elu(1.0)?;
                }
            }
            let target = nn::tensor(&y, &[chunk.len(), 1])?;
            let loss = (h - target)?.sqr()?.mean_all()?;
            let v = nn::to_scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: bi,
                    msg: format!("discriminator loss {v}"),
                });
            }
            opt.step(&store, &loss.backward()?, None)?;
            sum += v * chunk.len() as f64;
            seen += chunk.len();
        }
        curve.push(sum / seen as f64);
    }
    Ok(curve)
}

/// Equal-frequency bin index of every entry; tied values share a bin.
pub fn equal_frequency_bins(values: ArrayView1<f64>, bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let mid = (start + end - 1) as f64 / 2.0;
        let bin = ((mid * bins as f64 / n as f64) as usize).min(bins - 1);
        for &k in &idx[start..end] {
            out[k] = bin;
        }
        start = end;
    }
    out
}

fn entropy(labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let mut counts = std::collections::HashMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in mutual information (nats) between two discrete label sequences.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut joint = std::collections::HashMap::new();
    let mut pa = std::collections::HashMap::new();
    let mut pb = std::collections::HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0usize) += 1;
        *pa.entry(x).or_insert(0usize) += 1;
        *pb.entry(y).or_insert(0usize) += 1;
    }
    joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            let px = pa[&x] as f64 / n;
            let py = pb[&y] as f64 / n;
            pxy * (pxy / (px * py)).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

pub const MIG_BINS: usize = 20;

/// MIG of each latent variable `z_i`. `latents` is `[N, n, m]`, `factors` is
/// `[N, K]` of discrete labels.
pub fn mig_per_variable(latents: &Array3<f64>, factors: &Array2<usize>) -> Result<Vec<f64>> {
    let (count, n, m) = latents.dim();
    let (fcount, k) = factors.dim();
    if count != fcount {
        return Err(Error::ShapeMismatch {
            expected: vec![count, k],
            actual: vec![fcount, k],
        });
    }
    if k < 2 {
        return Err(Error::Metric("MIG needs at least two factors".into()));
    }
    if m < 2 {
        return Err(Error::Metric("MIG needs at least two latent dimensions".into()));
    }
    if latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "latents".into(),
            detail: "MIG input contains non-finite values".into(),
        });
    }
    let factor_cols: Vec<Vec<usize>> = (0..k).map(|c| factors.column(c).to_vec()).collect();
    let entropies: Vec<f64> = factor_cols.iter().map(|f| entropy(f)).collect();
    if let Some(z) = entropies.iter().position(|h| *h <= 0.0) {
        return Err(Error::Metric(format!("factor {z} has zero entropy")));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let binned: Vec<Vec<usize>> = (0..m)
            .map(|j| equal_frequency_bins(latents.slice(ndarray::s![.., i, j]), MIG_BINS))
            .collect();
        let mut gap_sum = 0.0;
        for (f, h) in factor_cols.iter().zip(&entropies) {
            let mut mi: Vec<f64> = binned.iter().map(|b| mutual_information(b, f)).collect();
            mi.sort_by(|a, b| b.total_cmp(a));
            gap_sum += (mi[0] - mi[1]) / h;
        }
        // The per-dimension score is the same for every j, so averaging over j leaves it unchanged.
        out.push((gap_sum / k as f64).clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Mean of [`mig_per_variable`] over the latent variables.
pub fn mig(latents: &Array3<f64>, factors: &Array2<usize>) -> Result<f64> {
    let per = mig_per_variable(latents, factors)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::Rng;

    fn batch_from(samples: &[f64], means: &[f64], ls: &[f64], dims: [usize; 3]) -> FactorBatch {
        let t = |v: &[f64]| nn::tensor(v, &dims).unwrap();
        FactorBatch::new(t(samples), t(means), t(ls)).unwrap()
    }

    #[test]
    fn identical_standard_normals_have_zero_tc() {
        let mut r = rng::seeded(0);
        let dims = [256, 1, 4];
        let z = rng::normal_vec(&mut r, 1024);
        let b = batch_from(&z, &[0.0; 1024], &[0.0; 1024], dims);
        let tc = nn::to_scalar(&tc_loss(&b).unwrap()).unwrap();
        assert!(tc.abs() < 0.05, "{tc}");
    }

    #[test]
    fn duplicated_dimension_raises_tc() {
        let mut r = rng::seeded(1);
        let (b, m) = (128, 3);
        let mut mu = rng::normal_vec(&mut r, b * m);
        let ls = vec![(0.1f64).ln(); b * m];
        let indep = {
            let z: Vec<f64> = mu.iter().zip(rng::normal_vec(&mut r, b * m)).map(|(u, e)| u + 0.1 * e).collect();
            nn::to_scalar(&tc_loss(&batch_from(&z, &mu, &ls, [b, 1, m])).unwrap()).unwrap()
        };
        for row in 0..b {
            mu[row * m + 1] = mu[row * m];
        }
        let z: Vec<f64> = mu.iter().zip(rng::normal_vec(&mut r, b * m)).map(|(u, e)| u + 0.1 * e).collect();
        let dep = nn::to_scalar(&tc_loss(&batch_from(&z, &mu, &ls, [b, 1, m])).unwrap()).unwrap();
        assert!(dep > 0.0 && dep > indep, "{indep} vs {dep}");
    }

    #[test]
    fn tc_averages_over_variables() {
        let mut r = rng::seeded(2);
        let (b, m) = (32, 2);
        let z = rng::normal_vec(&mut r, b * 2 * m);
        let mu: Vec<f64> = rng::normal_vec(&mut r, b * 2 * m);
        let ls = vec![-0.5; b * 2 * m];
        let both = batch_from(&z, &mu, &ls, [b, 2, m]);
        let single = |i: usize| {
            let pick = |t: &Tensor| t.narrow(1, i, 1).unwrap();
            let fb = FactorBatch::new(pick(&both.samples), pick(&both.means), pick(&both.log_scales)).unwrap();
            nn::to_scalar(&tc_loss(&fb).unwrap()).unwrap()
        };
        let avg = nn::to_scalar(&tc_loss(&both).unwrap()).unwrap();
        assert!((avg - (single(0) + single(1)) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn tc_rejects_single_sample() {
        let b = batch_from(&[0.0, 1.0], &[0.0, 0.0], &[0.0, 0.0], [1, 1, 2]);
        assert!(tc_loss(&b).is_err());
    }

    #[test]
    fn bins_are_equal_frequency_and_share_ties() {
        let v = Array1::from_iter((0..100).map(|i| i as f64));
        let b = equal_frequency_bins(v.view(), 20);
        for bin in 0..20 {
            assert_eq!(b.iter().filter(|x| **x == bin).count(), 5);
        }
        let tied = Array1::from(vec![1.0, 1.0, 1.0, 2.0, 2.0, 3.0]);
        let b = equal_frequency_bins(tied.view(), 3);
        assert_eq!(b[0], b[1]);
        assert_eq!(b[1], b[2]);
        assert_eq!(b[3], b[4]);
    }

    fn factor_setup(count: usize, seed: u64) -> (Array3<f64>, Array2<usize>) {
        let mut r = rng::seeded(seed);
        let k = 3;
        let factors = Array2::from_shape_fn((count, k), |_| r.random_range(0..5usize));
        let latents = Array3::from_shape_fn((count, 1, k), |(s, _, j)| {
            factors[[s, j]] as f64 + 0.01 * r.random::<f64>()
        });
        (latents, factors)
    }

    #[test]
    fn bijective_latents_score_near_one() {
        let (latents, factors) = factor_setup(10_000, 3);
        let v = mig(&latents, &factors).unwrap();
        assert!(v >= 0.9, "{v}");
    }

    #[test]
    fn independent_latents_score_near_zero() {
        let (_, factors) = factor_setup(10_000, 4);
        let mut r = rng::seeded(5);
        let latents = Array3::from_shape_fn((10_000, 2, 3), |_| r.random::<f64>());
        let v = mig(&latents, &factors).unwrap();
        assert!(v < 0.05, "{v}");
    }

    #[test]
    fn mig_rejects_degenerate_factors() {
        let latents = Array3::zeros((10, 1, 2));
        let constant = Array2::zeros((10, 2));
        assert!(mig(&latents, &constant).is_err());
        let one = Array2::from_shape_fn((10, 1), |(s, _)| s % 2);
        assert!(mig(&latents, &one).is_err());
    }

    #[test]
    fn mig_invariant_to_monotone_transforms() {
        let (latents, factors) = factor_setup(5_000, 6);
        let mut r = rng::seeded(7);
        let noisy = latents.mapv(|v| v + 2.0 * r.random::<f64>());
        let base = mig(&noisy, &factors).unwrap();
        let warped = noisy.mapv(|v| (3.0 * v).exp() - 7.0);
        let flipped = noisy.mapv(|v| -v.powi(3));
        assert!((mig(&warped, &factors).unwrap() - base).abs() <= 0.02);
        assert!((mig(&flipped, &factors).unwrap() - base).abs() <= 0.02);
    }

    #[test]
    fn discriminator_curve_length_and_constant_latents() {
        let latents = Array3::from_shape_fn((64, 2, 3), |(_, _, j)| (j + 1) as f64);
        let cfg = DiscriminatorConfig {
            epochs: 30,
            batch: 64,
            ..DiscriminatorConfig::default()
        };
        let curve = train_discriminator(&latents, &cfg).unwrap();
        assert_eq!(curve.len(), 30);
        assert!(*curve.last().unwrap() < 0.01, "{curve:?}");
        assert!(train_discriminator(&Array3::zeros((0, 2, 3)), &cfg).is_err());
    }

    #[test]
    fn discriminator_on_noise_approaches_label_variance() {
        let mut r = rng::seeded(8);
        let m = 4;
        let latents = Array3::from_shape_fn((256, 1, m), |_| rng::normal_vec(&mut r, 1)[0]);
        let cfg = DiscriminatorConfig {
            epochs: 15,
            batch: 128,
            condition_on_variable: false,
            ..DiscriminatorConfig::default()
        };
        let curve = train_discriminator(&latents, &cfg).unwrap();
        let oracle = ((m * m - 1) as f64) / 12.0;
        let last = *curve.last().unwrap();
        assert!((last - oracle).abs() < 0.15 * oracle, "{last} vs {oracle}");
    }
}
