//! Forecasting, metrics, schedule sweeps and diffusion snapshots.

use std::path::Path;

use candle_core::Tensor;
use ndarray::{s, Array2, Array3, Array4, ArrayViewD, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{NormStats, SeriesWindowSet, WindowSplit};
use crate::denoise::{denoise_jump, EnergyNet};
use crate::error::{Error, Result};
use crate::model::{relative, ForecastModel};
use crate::nn;
use crate::rng::{self, SeededRng};
use crate::schedule::{Chain, DiffusionSchedule};
use crate::train::{fit_and_score, ExperimentConfig, TrainedModel};

/// Forecasts for a batch of windows on the model's (normalized) scale.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `[W, S, l_y, d']` draws, cleaned unless the mean is cleaned instead.
    pub samples: Array4<f64>,
    /// `[W, l_y, d']`
    pub point: Array3<f64>,
    /// `[W, l_y, d']`, signed `σ_0²∇E`.
    pub uncertainty: Array3<f64>,
}

fn to_array3(t: &candle_core::Tensor) -> Result<Array3<f64>> {
    let (a, b, c) = t.dims3()?;
    Ok(Array3::from_shape_vec((a, b, c), nn::flat(t)?).expect("dims match data"))
}

/// Draws `samples` forecasts per input window. Inputs are used as given, with
/// no diffusion.
pub fn predict_with_rng(
    model: &ForecastModel,
    inputs: &Array3<f64>,
    samples: usize,
    mut rng: SeededRng,
    clean_mean: bool,
) -> Result<Prediction> {
    if samples == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let shape = model.shape();
    let (w, lx, d) = inputs.dim();
    if lx != shape.l_x || d != shape.in_dims {
        return Err(Error::ShapeMismatch {
            expected: vec![w, shape.l_x, shape.in_dims],
            actual: vec![w, lx, d],
        });
    }
    let (ly, dy) = (shape.l_y, shape.out_dims);
    let mut out = Prediction {
        samples: Array4::zeros((w, samples, ly, dy)),
        point: Array3::zeros((w, ly, dy)),
        uncertainty: Array3::zeros((w, ly, dy)),
    };
    if w == 0 {
        return Ok(out);
    }
    let x = nn::tensor(&inputs.iter().copied().collect::<Vec<_>>(), &[w, lx, d])?;
    let (xc, level) = model.center(&x)?;
    let level = level.as_ref();
    let feats = model.bvae.features(&xc)?;
    let energy = model.energy.as_ref();
    let jump = |e: &EnergyNet, y: &Tensor| -> Result<(Tensor, Tensor)> {
        let (clean, unc) = denoise_jump(e, &relative(y, level)?)?;
        let clean = match level {
            Some(l) => clean.broadcast_add(l)?,
            None => clean,
        };
        Ok((clean, unc))
    };
    for si in 0..samples {
        let eps = model.bvae.draw_eps(w, &mut rng)?;
        let z = model.bvae.posterior(&feats, &eps)?;
        let y = model.bvae.decode(&z)?.shifted(level)?.sample(&mut rng)?.detach();
        let draw = match energy {
            Some(e) if !clean_mean => {
                let (clean, unc) = jump(e, &y)?;
                out.uncertainty += &to_array3(&unc)?;
                to_array3(&clean)?
            }
            _ => to_array3(&y)?,
        };
        out.samples.slice_mut(s![.., si, .., ..]).assign(&draw);
    }
    out.point = out.samples.mean_axis(Axis(1)).expect("samples > 0");
    match energy {
        Some(e) if clean_mean => {
            let mean = nn::tensor(&out.point.iter().copied().collect::<Vec<_>>(), &[w, ly, dy])?;
            let (clean, unc) = jump(e, &mean)?;
            out.point = to_array3(&clean)?;
            out.uncertainty = to_array3(&unc)?;
        }
        Some(_) => out.uncertainty /= samples as f64,
        None => {}
    }
    Ok(out)
}

/// One forecast in raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult {
    /// `[S, l_y, d']`
    pub samples: Array3<f64>,
    /// `[l_y, d']`
    pub point: Array2<f64>,
    /// `[l_y, d']`
    pub uncertainty: Array2<f64>,
}

/// Forecasts a single raw `[l_x, d]` window and maps the result back to raw units.
pub fn forecast(
    trained: &TrainedModel,
    x_window: &Array2<f64>,
    samples: usize,
    seed: u64,
) -> Result<ForecastResult> {
    let shape = trained.shape();
    if x_window.dim() != (shape.l_x, shape.in_dims) {
        return Err(Error::ShapeMismatch {
            expected: vec![shape.l_x, shape.in_dims],
            actual: x_window.shape().to_vec(),
        });
    }
    let x = match &trained.norm {
        Some(n) => n.normalize(x_window),
        None => x_window.clone(),
    };
    let inputs = x.insert_axis(Axis(0));
    let pred = predict_with_rng(
        &trained.model,
        &inputs,
        samples,
        rng::seeded(seed),
        trained.config.eval.clean_mean,
    )?;
    let tn = trained.target_norm();
    let denorm = |a: Array2<f64>| match &tn {
        Some(n) => n.denormalize(&a),
        None => a,
    };
    let mut draws = pred.samples.index_axis(Axis(0), 0).to_owned();
    for mut d in draws.outer_iter_mut() {
        let raw = denorm(d.to_owned());
        d.assign(&raw);
    }
    let mut unc = pred.uncertainty.index_axis(Axis(0), 0).to_owned();
    if let Some(n) = &tn {
        unc *= &ndarray::ArrayView1::from(&n.scale[..]);
    }
    Ok(ForecastResult {
        samples: draws,
        point: denorm(pred.point.index_axis(Axis(0), 0).to_owned()),
        uncertainty: unc,
    })
}

/// Columns `step`, then `mean_k`, `uncertainty_k` for each target dimension.
pub fn write_forecast_csv(result: &ForecastResult, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dims = result.point.ncols();
    let mut header = vec!["step".to_string()];
    for k in 0..dims {
        header.push(format!("mean_{k}"));
        header.push(format!("uncertainty_{k}"));
    }
    w.write_record(&header)?;
    for (h, (p, u)) in result.point.outer_iter().zip(result.uncertainty.outer_iter()).enumerate() {
        let mut row = vec![h.to_string()];
        for k in 0..dims {
            row.push(p[k].to_string());
            row.push(u[k].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean squared error over all entries.
pub fn mse(pred: ArrayViewD<f64>, truth: ArrayViewD<f64>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            expected: truth.shape().to_vec(),
            actual: pred.shape().to_vec(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Metric("MSE of an empty array".into()));
    }
    let sum: f64 = pred.iter().zip(truth.iter()).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(sum / pred.len() as f64)
}

/// `Σ_{a,b} |x_a − x_b|` over all ordered pairs, via the sorted-order identity.
fn pair_abs_sum(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    2.0 * v
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - n + 1.0) * x)
        .sum::<f64>()
}

fn check_samples(samples: &[f64], truth: f64) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Metric("CRPS needs at least one sample".into()));
    }
    if !truth.is_finite() || samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "CRPS input".into(),
            detail: "samples or truth not finite".into(),
        });
    }
    Ok(())
}

/// `E|X − y| − ½E|X − X′|` with the second expectation over all `S²` pairs.
pub fn crps(samples: &[f64], truth: f64) -> Result<f64> {
    check_samples(samples, truth)?;
    let n = samples.len() as f64;
    let first = samples.iter().map(|x| (x - truth).abs()).sum::<f64>() / n;
    Ok(first - 0.5 * pair_abs_sum(samples) / (n * n))
}

/// As [`crps`] but with the `S(S−1)` pair denominator; needs `S ≥ 2`.
pub fn crps_unbiased(samples: &[f64], truth: f64) -> Result<f64> {
    check_samples(samples, truth)?;
    if samples.len() < 2 {
        return Err(Error::Metric("unbiased CRPS needs at least two samples".into()));
    }
    let n = samples.len() as f64;
    let first = samples.iter().map(|x| (x - truth).abs()).sum::<f64>() / n;
    Ok(first - 0.5 * pair_abs_sum(samples) / (n * (n - 1.0)))
}

/// Mean CRPS over every target entry; `samples` is `[W, S, l_y, d']`.
pub fn crps_windows(samples: &Array4<f64>, truth: &Array3<f64>, unbiased: bool) -> Result<f64> {
    let (w, s, ly, dy) = samples.dim();
    if truth.dim() != (w, ly, dy) {
        return Err(Error::ShapeMismatch {
            expected: vec![w, ly, dy],
            actual: truth.shape().to_vec(),
        });
    }
    if w * ly * dy == 0 {
        return Err(Error::Metric("CRPS over an empty split".into()));
    }
    let score = if unbiased { crps_unbiased } else { crps };
    let mut total = 0.0;
    let mut buf = vec![0.0; s];
    for i in 0..w {
        for h in 0..ly {
            for k in 0..dy {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = samples[[i, j, h, k]];
                }
                total += score(&buf, truth[[i, h, k]])?;
            }
        }
    }
    Ok(total / (w * ly * dy) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Normalized scale.
    pub mse: f64,
    pub crps: f64,
    /// Raw units.
    pub mse_raw: f64,
    pub crps_raw: f64,
    pub windows: usize,
}

fn denormalize_windows(a: &Array3<f64>, norm: &NormStats) -> Array3<f64> {
    let mut out = a.clone();
    for mut w in out.outer_iter_mut() {
        let raw = norm.denormalize(&w.to_owned());
        w.assign(&raw);
    }
    out
}

fn scores_for(
    samples: &Array4<f64>,
    point: &Array3<f64>,
    truth: &Array3<f64>,
    norm: Option<&NormStats>,
    unbiased: bool,
) -> Result<Scores> {
    let m = mse(point.view().into_dyn(), truth.view().into_dyn())?;
    let c = crps_windows(samples, truth, unbiased)?;
    let (mse_raw, crps_raw) = match norm {
        Some(n) => {
            let raw_truth = denormalize_windows(truth, n);
            let raw_point = denormalize_windows(point, n);
            let mut raw_samples = samples.clone();
            for mut w in raw_samples.outer_iter_mut() {
                for mut d in w.outer_iter_mut() {
                    let raw = n.denormalize(&d.to_owned());
                    d.assign(&raw);
                }
            }
            (
                mse(raw_point.view().into_dyn(), raw_truth.view().into_dyn())?,
                crps_windows(&raw_samples, &raw_truth, unbiased)?,
            )
        }
        None => (m, c),
    };
    Ok(Scores {
        mse: m,
        crps: c,
        mse_raw,
        crps_raw,
        windows: truth.dim().0,
    })
}

/// Forecasts every window of `split` and scores against its targets.
pub fn score_split(
    trained: &TrainedModel,
    split: &WindowSplit,
    samples: usize,
    rng: SeededRng,
) -> Result<Scores> {
    let eval = trained.config.eval;
    let pred = predict_with_rng(&trained.model, &split.inputs, samples, rng, eval.clean_mean)?;
    scores_for(
        &pred.samples,
        &pred.point,
        &split.targets,
        trained.target_norm().as_ref(),
        eval.unbiased_crps,
    )
}

/// Point-mass forecast at the mean of the training targets, scored on the test split.
pub fn climatology_scores(windows: &SeriesWindowSet) -> Result<Scores> {
    let train = &windows.train.targets;
    let (_, ly, dy) = train.dim();
    let flat = train
        .to_shape((train.len() / dy, dy))
        .map_err(|e| Error::Data(e.to_string()))?
        .to_owned();
    let mean = flat.mean_axis(Axis(0)).expect("non-empty training split");
    let test = &windows.test.targets;
    let w = test.dim().0;
    let point = Array3::from_shape_fn((w, ly, dy), |(_, _, k)| mean[k]);
    let samples = point.clone().insert_axis(Axis(1));
    scores_for(&samples, &point, test, windows.target_norm().as_ref(), false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub beta_end: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub mse: Option<f64>,
    pub crps: Option<f64>,
    pub error: Option<String>,
}

/// Trains one model per `(β_end, T)` cell and scores the test split. Cells
/// that fail are recorded with their error and the sweep carries on.
pub fn sweep_schedule(
    base: &ExperimentConfig,
    beta_ends: &[f64],
    steps: &[usize],
    windows: &SeriesWindowSet,
) -> Result<Vec<SweepCell>> {
    if beta_ends.is_empty() || steps.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()));
    }
    let mut cells = Vec::with_capacity(beta_ends.len() * steps.len());
    for &beta_end in beta_ends {
        for &t in steps {
            let mut cfg = base.clone();
            cfg.schedule.beta_end = beta_end;
            cfg.schedule.steps = t;
            let cell = match fit_and_score(&cfg, windows) {
                Ok(run) => SweepCell {
                    beta_end,
                    steps: t,
                    mse: Some(run.test.mse),
                    crps: Some(run.test.crps),
                    error: None,
                },
                Err(e) => {
                    log::warn!("sweep cell beta_end={beta_end} T={t} failed: {e}");
                    SweepCell {
                        beta_end,
                        steps: t,
                        mse: None,
                        crps: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            cells.push(cell);
        }
    }
    Ok(cells)
}

pub fn write_sweep_csv(cells: &[SweepCell], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["beta_end", "T", "mse", "crps", "error"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in cells {
        w.write_record([
            c.beta_end.to_string(),
            c.steps.to_string(),
            opt(c.mse),
            opt(c.crps),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSnapshot {
    pub t: usize,
    pub alpha_bar: f64,
    /// Frobenius norm of the change from the original series.
    pub deviation: f64,
    pub values: Array2<f64>,
}

/// Diffuses `series` on the input chain at each requested step with one
/// shared noise draw, so snapshots differ only through `t`. `t = 0` returns
/// the series unchanged.
pub fn diffusion_inspect(
    series: &Array2<f64>,
    schedule: &DiffusionSchedule,
    ts: &[usize],
    seed: u64,
) -> Result<Vec<DiffusionSnapshot>> {
    let mut r = rng::seeded(seed);
    let noise = rng::normal_array(&mut r, series.dim());
    ts.iter()
        .map(|&t| {
            let (values, alpha_bar) = if t == 0 {
                (series.clone(), 1.0)
            } else {
                (
                    schedule.diffuse(series, t, Chain::Input, &noise)?,
                    schedule.alpha_bar[t - 1],
                )
            };
            let deviation = (&values - series).mapv(|v| v * v).sum().sqrt();
            Ok(DiffusionSnapshot {
                t,
                alpha_bar,
                deviation,
                values,
            })
        })
        .collect()
}

/// Writes `summary` (one row per step) and `values` (long format) CSVs.
pub fn write_inspect_csv(
    snaps: &[DiffusionSnapshot],
    summary: impl AsRef<Path>,
    values: impl AsRef<Path>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(summary)?;
    w.write_record(["t", "alpha_bar", "deviation"])?;
    for s in snaps {
        w.write_record([s.t.to_string(), s.alpha_bar.to_string(), s.deviation.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(values)?;
    if let Some(first) = snaps.first() {
        let mut header = vec!["t".to_string(), "row".to_string()];
        header.extend((0..first.values.ncols()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
    }
    for s in snaps {
        for (i, row) in s.values.outer_iter().enumerate() {
            let mut rec = vec![s.t.to_string(), i.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
