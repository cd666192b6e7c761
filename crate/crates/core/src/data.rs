//! Synthetic generators, CSV ingestion, normalization and rolling windows.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// A multivariate series of `N` time points by `d` dimensions with the
/// subset of dimensions to forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub values: Array2<f64>,
    pub timestamps: Option<Vec<i64>>,
    pub target_dims: Vec<usize>,
    pub column_names: Option<Vec<String>>,
}

impl RawSeries {
    /// Wraps a matrix, targeting the last column.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let d = values.ncols();
        Self::with_targets(values, vec![d.saturating_sub(1)])
    }

    pub fn with_targets(values: Array2<f64>, target_dims: Vec<usize>) -> Result<Self> {
        let s = Self {
            values,
            timestamps: None,
            target_dims,
            column_names: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dims(&self) -> usize {
        self.values.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.nrows() == 0 || self.values.ncols() == 0 {
            return Err(Error::Data("series has no rows or no columns".into()));
        }
        if self.target_dims.is_empty() {
            return Err(Error::Data("at least one target dimension is required".into()));
        }
        if let Some(&bad) = self.target_dims.iter().find(|&&j| j >= self.dims()) {
            return Err(Error::Data(format!(
                "target dimension {bad} out of range for {} columns",
                self.dims()
            )));
        }
        if let Some(((r, c), v)) = self.values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "series".into(),
                detail: format!("row {r}, column {c} = {v}"),
            });
        }
        if let Some(ts) = &self.timestamps {
            if ts.len() != self.len() || ts.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Data(
                    "timestamps must match row count and increase strictly".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Parameters of the three-lag nonlinear latent recurrence
/// `w_t = a·w_{t-1} + tanh(b·w_{t-2}) + sin(w_{t-3}) + ε`, observed through a
/// random `2 × k` projection plus noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub a: f64,
    pub b: f64,
    pub k: usize,
    pub n: usize,
    pub process_noise_std: f64,
    pub obs_noise_std: f64,
}

impl SyntheticSpec {
    /// Dataset D1: 800 × 20 with a = 0.9, b = 0.2 and N(0, 0.5 I) noise.
    pub fn d1() -> Self {
        Self {
            a: 0.9,
            b: 0.2,
            k: 20,
            n: 800,
            process_noise_std: 0.5f64.sqrt(),
            obs_noise_std: 0.5f64.sqrt(),
        }
    }

    /// Dataset D2: 800 × 40 with a = b = 0.5.
    pub fn d2() -> Self {
        Self {
            a: 0.5,
            b: 0.5,
            k: 40,
            ..Self::d1()
        }
    }

    pub fn generate(&self, seed: u64) -> Result<RawSeries> {
        Ok(self.generate_parts(seed)?.series)
    }

    /// Like [`generate`](Self::generate) but also returns the latent path and projection.
    pub fn generate_parts(&self, seed: u64) -> Result<SyntheticParts> {
        if self.n < 4 {
            return Err(Error::Data(format!(
                "need at least 4 time points for a three-lag recurrence, got {}",
                self.n
            )));
        }
        if self.k == 0 {
            return Err(Error::Data("k must be at least 1".into()));
        }
        if !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::Data("recurrence constants must be finite".into()));
        }
        let mut rng = rng::seeded(seed);
        let init = [
            [rng.random::<f64>(), rng.random::<f64>()],
            [rng.random::<f64>(), rng.random::<f64>()],
            [rng.random::<f64>(), rng.random::<f64>()],
        ];
        let proj = Array2::from_shape_fn((2, self.k), |_| rng.random_range(-1.0..=1.0));
        let w = simulate_latent(
            self.a,
            self.b,
            init,
            self.n,
            self.process_noise_std,
            &mut rng,
        )?;
        let mut x = w.dot(&proj);
        if self.obs_noise_std > 0.0 {
            let noise = rng::normal_array(&mut rng, x.dim());
            x.scaled_add(self.obs_noise_std, &noise);
        }
        Ok(SyntheticParts {
            series: RawSeries::new(x)?,
            latent: w,
            projection: proj,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticParts {
    pub series: RawSeries,
    /// `[N, 2]` latent path.
    pub latent: Array2<f64>,
    /// `[2, k]` observation matrix.
    pub projection: Array2<f64>,
}

/// Runs the latent recurrence from three given initial states.
pub fn simulate_latent<R: Rng + ?Sized>(
    a: f64,
    b: f64,
    init: [[f64; 2]; 3],
    n: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if n < 4 {
        return Err(Error::Data(format!("need at least 4 time points, got {n}")));
    }
    let mut w = Array2::<f64>::zeros((n, 2));
    for (t, row) in init.iter().enumerate() {
        w[[t, 0]] = row[0];
        w[[t, 1]] = row[1];
    }
    for t in 3..n {
        let eps = if noise_std > 0.0 {
            rng::normal_vec(rng, 2)
        } else {
            vec![0.0, 0.0]
        };
        for c in 0..2 {
            w[[t, c]] = a * w[[t - 1, c]]
                + (b * w[[t - 2, c]]).tanh()
                + w[[t - 3, c]].sin()
                + noise_std * eps[c];
        }
    }
    Ok(w)
}

pub fn generate_synthetic(
    a: f64,
    b: f64,
    k: usize,
    n: usize,
    noise_std: f64,
    seed: u64,
) -> Result<RawSeries> {
    SyntheticSpec {
        a,
        b,
        k,
        n,
        process_noise_std: noise_std,
        obs_noise_std: noise_std,
    }
    .generate(seed)
}

/// The small overfitting-demo series: a = b = 0.5, unit process noise and
/// N(0, 0.5 I) observation noise.
pub fn generate_toy(d: usize, n: usize, seed: u64) -> Result<RawSeries> {
    SyntheticSpec {
        a: 0.5,
        b: 0.5,
        k: d,
        n,
        process_noise_std: 1.0,
        obs_noise_std: 0.5f64.sqrt(),
    }
    .generate(seed)
}

/// Reads a comma-separated numeric file. A first row with any non-numeric
/// cell is treated as a header. `target_dims` defaults to the last column.
pub fn load_csv(path: impl AsRef<Path>, target_dims: Option<Vec<usize>>) -> Result<RawSeries> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut header = None;
    let mut width = None;

    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, _>> =
            record.iter().map(|c| c.parse::<f64>()).collect();

        if rows.is_empty() && header.is_none() && parsed.iter().any(|p| p.is_err()) {
            header = Some(record.iter().map(str::to_string).collect::<Vec<_>>());
            width = Some(record.len());
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::CsvCell {
                row: line,
                col: record.len().min(expected) + 1,
                msg: format!("expected {expected} columns, found {}", record.len()),
            });
        }
        let mut row = Vec::with_capacity(record.len());
        for (j, (cell, p)) in record.iter().zip(parsed).enumerate() {
            match p {
                Ok(v) if v.is_finite() => row.push(v),
                Ok(v) => {
                    return Err(Error::CsvCell {
                        row: line,
                        col: j + 1,
                        msg: format!("non-finite value {v}"),
                    })
                }
                Err(_) => {
                    return Err(Error::CsvCell {
                        row: line,
                        col: j + 1,
                        msg: format!("cannot parse {cell:?} as a number"),
                    })
                }
            }
        }
        rows.push(row);
    }

    if rows.is_empty() {
        return Err(Error::Data(format!("{} contains no data rows", path.display())));
    }
    let d = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let values = Array2::from_shape_vec((rows.len(), d), flat)
        .map_err(|e| Error::Data(e.to_string()))?;
    let mut series = RawSeries::with_targets(values, target_dims.unwrap_or_else(|| vec![d - 1]))?;
    series.column_names = header;
    Ok(series)
}

/// Writes a series in the same format `load_csv` reads, with a header row.
pub fn write_csv(series: &RawSeries, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    let names: Vec<String> = match &series.column_names {
        Some(n) => n.clone(),
        None => (0..series.dims()).map(|j| format!("x{j}")).collect(),
    };
    writeln!(out, "{}", names.join(","))?;
    for row in series.values.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Keeps the leading `round(fraction · N)` rows (at least one).
pub fn slice_fraction(series: &RawSeries, fraction: f64) -> Result<RawSeries> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Data(format!("fraction {fraction} outside (0, 1]")));
    }
    let keep = ((fraction * series.len() as f64).round() as usize).clamp(1, series.len());
    let mut out = series.clone();
    out.values = series.values.slice(s![..keep, ..]).to_owned();
    out.timestamps = series.timestamps.as_ref().map(|t| t[..keep].to_vec());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormStats {
    /// Per-column mean and population standard deviation; constant columns get scale 1.
    pub fn fit(rows: ArrayView2<f64>) -> Self {
        let mean = rows.mean_axis(Axis(0)).expect("non-empty rows");
        let scale = rows
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { s } else { 1.0 });
        Self {
            mean: mean.to_vec(),
            scale: scale.to_vec(),
        }
    }

    pub fn normalize(&self, values: &Array2<f64>) -> Array2<f64> {
        let mut out = values.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale[j];
            }
        }
        out
    }

    pub fn denormalize(&self, values: &Array2<f64>) -> Array2<f64> {
        let mut out = values.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.scale[j] + self.mean[j];
            }
        }
        out
    }

    /// Restricts the statistics to the given columns, in order.
    pub fn select(&self, dims: &[usize]) -> Self {
        Self {
            mean: dims.iter().map(|&j| self.mean[j]).collect(),
            scale: dims.iter().map(|&j| self.scale[j]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Windows cut from one chronological segment.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSplit {
    /// `[windows, l_x, d]`
    pub inputs: Array3<f64>,
    /// `[windows, l_y, d']`
    pub targets: Array3<f64>,
    /// Source-series row where each window's input starts.
    pub start_rows: Vec<usize>,
}

impl WindowSplit {
    pub fn len(&self) -> usize {
        self.start_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start_rows.is_empty()
    }

    pub fn input(&self, i: usize) -> Array2<f64> {
        self.inputs.index_axis(Axis(0), i).to_owned()
    }

    pub fn target(&self, i: usize) -> Array2<f64> {
        self.targets.index_axis(Axis(0), i).to_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBoundaries {
    pub n_rows: usize,
    pub train_end: usize,
    pub val_end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindowSet {
    pub l_x: usize,
    pub l_y: usize,
    pub dims: usize,
    pub target_dims: Vec<usize>,
    pub boundaries: SplitBoundaries,
    pub train: WindowSplit,
    pub val: WindowSplit,
    pub test: WindowSplit,
    /// Statistics over all columns, fitted on training rows. `None` when
    /// windows hold raw values.
    pub norm: Option<NormStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSetSummary {
    pub l_x: usize,
    pub l_y: usize,
    pub dims: usize,
    pub target_dims: Vec<usize>,
    pub boundaries: SplitBoundaries,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,
    pub norm: Option<NormStats>,
}

impl SeriesWindowSet {
    pub fn split(&self, which: Split) -> &WindowSplit {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn target_norm(&self) -> Option<NormStats> {
        self.norm.as_ref().map(|n| n.select(&self.target_dims))
    }

    pub fn summary(&self) -> WindowSetSummary {
        WindowSetSummary {
            l_x: self.l_x,
            l_y: self.l_y,
            dims: self.dims,
            target_dims: self.target_dims.clone(),
            boundaries: self.boundaries,
            train_windows: self.train.len(),
            val_windows: self.val.len(),
            test_windows: self.test.len(),
            norm: self.norm.clone(),
        }
    }
}

/// Row indices `(train_end, val_end)` for a chronological split by integer ratios.
pub fn split_points(n: usize, ratios: (usize, usize, usize)) -> Result<(usize, usize)> {
    let total = ratios.0 + ratios.1 + ratios.2;
    if total == 0 || ratios.0 == 0 {
        return Err(Error::Data(format!("invalid split ratios {ratios:?}")));
    }
    let train_end = n * ratios.0 / total;
    let val_end = n * (ratios.0 + ratios.1) / total;
    Ok((train_end, val_end))
}

/// Window count for a segment of `len` rows.
pub fn window_count(len: usize, l_x: usize, l_y: usize) -> usize {
    (len + 1).saturating_sub(l_x + l_y)
}

/// Partitions the series chronologically, then rolls stride-1 windows inside
/// each segment so no window straddles a boundary. The training segment must
/// yield at least one window; shorter validation/test segments yield none.
pub fn make_windows(
    series: &RawSeries,
    l_x: usize,
    l_y: usize,
    ratios: (usize, usize, usize),
    normalize: bool,
) -> Result<SeriesWindowSet> {
    series.validate()?;
    if l_x == 0 || l_y == 0 {
        return Err(Error::Data("window lengths must be positive".into()));
    }
    let n = series.len();
    let (train_end, val_end) = split_points(n, ratios)?;
    if window_count(train_end, l_x, l_y) == 0 {
        return Err(Error::Data(format!(
            "training segment of {train_end} rows is too short for one {l_x}+{l_y} window"
        )));
    }

    let (values, norm) = if normalize {
        let stats = NormStats::fit(series.values.slice(s![..train_end, ..]));
        (stats.normalize(&series.values), Some(stats))
    } else {
        (series.values.clone(), None)
    };

    let cut = |start: usize, end: usize| -> WindowSplit {
        let count = window_count(end - start, l_x, l_y);
        let d = values.ncols();
        let dt = series.target_dims.len();
        let mut inputs = Array3::<f64>::zeros((count, l_x, d));
        let mut targets = Array3::<f64>::zeros((count, l_y, dt));
        let mut start_rows = Vec::with_capacity(count);
        for w in 0..count {
            let r0 = start + w;
            inputs
                .index_axis_mut(Axis(0), w)
                .assign(&values.slice(s![r0..r0 + l_x, ..]));
            for (k, &j) in series.target_dims.iter().enumerate() {
                for h in 0..l_y {
                    targets[[w, h, k]] = values[[r0 + l_x + h, j]];
                }
            }
            start_rows.push(r0);
        }
        WindowSplit {
            inputs,
            targets,
            start_rows,
        }
    };

    let train = cut(0, train_end);
    let val = cut(train_end, val_end);
    let test = cut(val_end, n);
    if val.is_empty() || test.is_empty() {
        log::warn!(
            "split {:?} of {n} rows leaves {} validation and {} test windows",
            ratios,
            val.len(),
            test.len()
        );
    }

    Ok(SeriesWindowSet {
        l_x,
        l_y,
        dims: series.dims(),
        target_dims: series.target_dims.clone(),
        boundaries: SplitBoundaries {
            n_rows: n,
            train_end,
            val_end,
        },
        train,
        val,
        test,
        norm,
    })
}

/// Where an experiment's raw series comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    D1 {
        seed: u64,
    },
    D2 {
        seed: u64,
    },
    Toy {
        dims: usize,
        points: usize,
        seed: u64,
    },
    Synthetic {
        spec: SyntheticSpec,
        seed: u64,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        target_dims: Option<Vec<usize>>,
        #[serde(default = "full_fraction")]
        fraction: f64,
    },
}

fn full_fraction() -> f64 {
    1.0
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::D1 { seed: 0 }
    }
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        match self {
            Self::D1 { .. } => "D1".into(),
            Self::D2 { .. } => "D2".into(),
            Self::Toy { .. } => "toy".into(),
            Self::Synthetic { .. } => "synthetic".into(),
            Self::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
        }
    }

    pub fn load(&self) -> Result<RawSeries> {
        match self {
            Self::D1 { seed } => SyntheticSpec::d1().generate(*seed),
            Self::D2 { seed } => SyntheticSpec::d2().generate(*seed),
            Self::Toy { dims, points, seed } => generate_toy(*dims, *points, *seed),
            Self::Synthetic { spec, seed } => spec.generate(*seed),
            Self::Csv {
                path,
                target_dims,
                fraction,
            } => slice_fraction(&load_csv(path, target_dims.clone())?, *fraction),
        }
    }
}
