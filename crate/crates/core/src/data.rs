//! Datasets: CSV ingestion, splitting, scaling, synthetic generators and
//! principal-component diagnostics.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::models::RANK_TOL;

/// Width of the radial response used by [`synth_nonlinear`].
pub const SYNTH_NONLINEAR_WIDTH: f64 = 2.0;
/// Half-width of the uniform box the [`synth_nonlinear`] inputs are drawn from.
pub const SYNTH_NONLINEAR_BOX: f64 = 3.0;

/// Spectra with their response.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Band centers (nm), when the spectral headers are numeric.
    pub wavelengths: Option<Vec<f64>>,
    pub ids: Option<Vec<String>>,
    pub feature_names: Vec<String>,
    pub response_name: String,
}

impl Dataset {
    /// Builds a dataset with generic feature names `x0..`.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        let ds = Self {
            x,
            y,
            wavelengths: None,
            ids: None,
            feature_names: names,
            response_name: "y".into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    fn validate(&self) -> Result<()> {
        if self.x.nrows() != self.y.len() {
            return Err(Error::input(format!(
                "{} spectra but {} responses",
                self.x.nrows(),
                self.y.len()
            )));
        }
        if self.x.nrows() == 0 || self.x.ncols() == 0 {
            return Err(Error::input("dataset is empty"));
        }
        if self.feature_names.len() != self.x.ncols() {
            return Err(Error::input("feature name count does not match columns"));
        }
        if let Some(ids) = &self.ids {
            if ids.len() != self.x.nrows() {
                return Err(Error::input("id count does not match rows"));
            }
        }
        if let Some(w) = &self.wavelengths {
            if w.len() != self.x.ncols() || w.windows(2).any(|p| p[1] <= p[0]) {
                return Err(Error::input(
                    "wavelengths must be strictly increasing, one per band",
                ));
            }
        }
        if self.x.iter().chain(self.y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::input("dataset contains non-finite values"));
        }
        Ok(())
    }

    /// Rows selected by `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            wavelengths: self.wavelengths.clone(),
            ids: self
                .ids
                .as_ref()
                .map(|ids| idx.iter().map(|&i| ids[i].clone()).collect()),
            feature_names: self.feature_names.clone(),
            response_name: self.response_name.clone(),
        }
    }

    /// Sample labels, falling back to the zero-based row index.
    pub fn labels(&self) -> Vec<String> {
        match &self.ids {
            Some(ids) => ids.clone(),
            None => (0..self.n_samples()).map(|i| i.to_string()).collect(),
        }
    }

    /// Writes the dataset as CSV. Numbers use the shortest representation
    /// that parses back to the same `f64`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header: Vec<&str> = Vec::new();
        if self.ids.is_some() {
            header.push("id");
        }
        header.extend(self.feature_names.iter().map(String::as_str));
        header.push(&self.response_name);
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for i in 0..self.n_samples() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            if let Some(ids) = &self.ids {
                rec.push(ids[i].clone());
            }
            rec.extend(self.x.row(i).iter().map(|v| v.to_string()));
            rec.push(self.y[i].to_string());
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::input(format!("{}: {e}", path.display()))
    }
}

/// A CSV table of spectra, with the response column optional.
#[derive(Debug, Clone)]
pub struct SpectraTable {
    pub x: DMatrix<f64>,
    pub y: Option<DVector<f64>>,
    pub ids: Option<Vec<String>>,
    pub feature_names: Vec<String>,
    pub wavelengths: Option<Vec<f64>>,
}

/// Reads a spectra CSV. When `response` is `Some`, that column must exist and
/// becomes `y`; when `optional_response` names a column that happens to be
/// present, it is dropped from the spectra.
pub fn read_spectra(
    path: &Path,
    response: Option<&str>,
    optional_response: Option<&str>,
) -> Result<SpectraTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let find = |name: &str| headers.iter().position(|h| h == name);
    let y_col = match response {
        Some(name) => Some(find(name).ok_or_else(|| {
            Error::input(format!(
                "{}: response column '{name}' not found",
                path.display()
            ))
        })?),
        None => optional_response.and_then(find),
    };
    let id_col = find("id");
    let feat_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| Some(c) != y_col && Some(c) != id_col)
        .collect();
    if feat_cols.is_empty() {
        return Err(Error::input(format!(
            "{}: no spectral columns",
            path.display()
        )));
    }

    let mut values: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut ids: Vec<String> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => Error::input(format!(
                "{}: row {line} has a different number of fields than the header",
                path.display()
            )),
            _ => csv_err(path, e),
        })?;
        let parse = |c: usize| -> Result<f64> {
            let cell = rec.get(c).unwrap_or("").trim();
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::input(format!(
                    "{}: row {line}, column '{}': invalid number '{cell}'",
                    path.display(),
                    headers[c]
                ))),
            }
        };
        for &c in &feat_cols {
            values.push(parse(c)?);
        }
        if let Some(c) = y_col {
            ys.push(parse(c)?);
        }
        if let Some(c) = id_col {
            ids.push(rec.get(c).unwrap_or("").to_string());
        }
    }
    let n = values.len() / feat_cols.len();
    if n == 0 {
        return Err(Error::input(format!("{}: no data rows", path.display())));
    }
    let feature_names: Vec<String> = feat_cols.iter().map(|&c| headers[c].clone()).collect();
    let parsed: Option<Vec<f64>> = feature_names
        .iter()
        .map(|h| h.parse::<f64>().ok())
        .collect();
    let wavelengths = match parsed {
        Some(w) if w.iter().all(|v| v.is_finite()) => {
            if w.windows(2).any(|p| p[1] <= p[0]) {
                return Err(Error::input(format!(
                    "{}: numeric band headers must be strictly increasing",
                    path.display()
                )));
            }
            Some(w)
        }
        _ => None,
    };
    Ok(SpectraTable {
        x: DMatrix::from_row_slice(n, feat_cols.len(), &values),
        y: y_col.map(|_| DVector::from_vec(ys)),
        ids: id_col.map(|_| ids),
        feature_names,
        wavelengths,
    })
}

/// Loads a dataset from CSV with the given response column.
pub fn load_csv(path: &Path, response_column: &str) -> Result<Dataset> {
    let t = read_spectra(path, Some(response_column), None)?;
    let ds = Dataset {
        x: t.x,
        y: t.y.expect("response column requested"),
        wavelengths: t.wavelengths,
        ids: t.ids,
        feature_names: t.feature_names,
        response_name: response_column.to_string(),
    };
    if ds.n_samples() < 3 {
        return Err(Error::input(format!(
            "{}: need at least 3 samples, found {}",
            path.display(),
            ds.n_samples()
        )));
    }
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    Random,
    /// Quantile bins of the response, each split proportionally.
    Stratified {
        bins: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_strategy")]
    pub strategy: SplitStrategy,
}

fn default_strategy() -> SplitStrategy {
    SplitStrategy::Random
}

/// Splits into (train, test). Both partitions keep the original row order.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(Error::input(format!(
            "test fraction must be in (0, 1), got {}",
            spec.test_fraction
        )));
    }
    let n = ds.n_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut is_test = vec![false; n];
    match spec.strategy {
        SplitStrategy::Random => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let n_test = (spec.test_fraction * n as f64).round() as usize;
            for &i in perm.iter().take(n_test) {
                is_test[i] = true;
            }
        }
        SplitStrategy::Stratified { bins } => {
            if bins == 0 || bins > n {
                return Err(Error::input(format!(
                    "stratified split needs 1..={n} bins, got {bins}"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| ds.y[a].total_cmp(&ds.y[b]));
            for g in 0..bins {
                let mut members = order[g * n / bins..(g + 1) * n / bins].to_vec();
                members.shuffle(&mut rng);
                let take = (spec.test_fraction * members.len() as f64).round() as usize;
                for &i in members.iter().take(take) {
                    is_test[i] = true;
                }
            }
        }
    }
    let test: Vec<usize> = (0..n).filter(|&i| is_test[i]).collect();
    let train: Vec<usize> = (0..n).filter(|&i| !is_test[i]).collect();
    if test.is_empty() || train.is_empty() {
        return Err(Error::input(format!(
            "test fraction {} leaves an empty partition for {n} samples",
            spec.test_fraction
        )));
    }
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    None,
    /// Subtract the per-band mean only.
    #[default]
    Center,
    /// Subtract the mean and divide by the sample standard deviation.
    Autoscale,
}

/// Column-wise affine preprocessing fitted on training spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    pub fn fit(x: &DMatrix<f64>, mode: ScaleMode) -> Self {
        let p = x.ncols();
        let n = x.nrows();
        match mode {
            ScaleMode::None => Self {
                mean: vec![0.0; p],
                scale: vec![1.0; p],
            },
            ScaleMode::Center | ScaleMode::Autoscale => {
                let mean: Vec<f64> = linalg::column_means(x).iter().copied().collect();
                let scale = if mode == ScaleMode::Autoscale && n > 1 {
                    x.column_iter()
                        .zip(&mean)
                        .map(|(c, m)| {
                            let var =
                                c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                            let sd = var.sqrt();
                            if sd > 0.0 {
                                sd
                            } else {
                                1.0
                            }
                        })
                        .collect()
                } else {
                    vec![1.0; p]
                };
                Self { mean, scale }
            }
        }
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::input(format!(
                "scaler fitted on {} bands, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.mean[j]) / self.scale[j]
        }))
    }

    fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            x: self.transform(&ds.x)?,
            ..ds.clone()
        })
    }
}

/// Fits a scaler on `train` and applies it to `train` and every dataset in `others`.
pub fn standardize(
    train: &Dataset,
    others: &[Dataset],
    mode: ScaleMode,
) -> Result<(Dataset, Vec<Dataset>, Scaler)> {
    let scaler = Scaler::fit(&train.x, mode);
    let t = scaler.apply(train)?;
    let o = others
        .iter()
        .map(|d| scaler.apply(d))
        .collect::<Result<_>>()?;
    Ok((t, o, scaler))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Leading principal-component scores of the column-centered spectra, sorted
/// by decreasing variance, together with the numerical rank.
pub fn pc_scores(x: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let mu = linalg::column_means(x);
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= mu.transpose();
    }
    let svd = xc.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let sq = DVector::from_iterator(s.len(), order.iter().map(|&i| s[i] * s[i]));
    let rank = linalg::numerical_rank(&sq, RANK_TOL);
    let scores = DMatrix::from_fn(x.nrows(), rank, |i, k| u[(i, order[k])] * s[order[k]]);
    (scores, rank)
}

/// Pearson correlation between each of the first `n_pcs` linear PC scores and the response.
pub fn pc_response_correlation(ds: &Dataset, n_pcs: usize) -> Result<Vec<f64>> {
    let y = ds.y.as_slice();
    let first = y[0];
    if y.iter().all(|&v| v == first) {
        return Err(Error::UndefinedMetric(
            "correlation is undefined for a constant response".into(),
        ));
    }
    let (scores, rank) = pc_scores(&ds.x);
    if n_pcs == 0 || n_pcs > rank {
        return Err(Error::Rank {
            context: "principal components of the spectra".into(),
            requested: n_pcs,
            available: rank,
        });
    }
    Ok((0..n_pcs)
        .map(|k| pearson(scores.column(k).as_slice(), y))
        .collect())
}

fn check_synth_sizes(n: usize, p: usize, noise: f64) -> Result<()> {
    if n < 3 {
        return Err(Error::input(format!("need n >= 3 samples, got {n}")));
    }
    if p == 0 {
        return Err(Error::input("need p >= 1 features"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::input(format!(
            "noise must be a nonnegative number, got {noise}"
        )));
    }
    Ok(())
}

fn bump(lambda: f64, center: f64, width: f64) -> f64 {
    (-(lambda - center).powi(2) / (2.0 * width * width)).exp()
}

/// Smooth spectra on a 450–950 nm grid whose dominant variation is one
/// absorption feature; the response is a fixed linear functional of the
/// spectrum plus Gaussian noise.
pub fn synth_collinear(n: usize, p: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_synth_sizes(n, p, noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wavelengths: Vec<f64> = if p == 1 {
        vec![700.0]
    } else {
        (0..p)
            .map(|j| 450.0 + 500.0 * j as f64 / (p - 1) as f64)
            .collect()
    };
    // Dominant, secondary and minor features with decreasing spread.
    let features = [(650.0, 80.0, 1.0), (880.0, 30.0, 0.3), (480.0, 20.0, 0.2)];
    let shapes: Vec<Vec<f64>> = features
        .iter()
        .map(|&(c, w, _)| wavelengths.iter().map(|&l| bump(l, c, w)).collect())
        .collect();
    let g1 = &shapes[0];
    let g1_sq: f64 = g1.iter().map(|v| v * v).sum();

    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let z: Vec<f64> = features
            .iter()
            .map(|&(_, _, sd)| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for j in 0..p {
            let mut v = 0.3;
            for (zk, g) in z.iter().zip(&shapes) {
                v += 0.05 * zk * g[j];
            }
            x[(i, j)] = v;
        }
        let functional: f64 = (0..p).map(|j| g1[j] * x[(i, j)]).sum::<f64>() / g1_sq;
        y[i] = 20.0 * functional + noise * rng.sample::<f64, _>(StandardNormal);
    }
    let mut ds = Dataset::new(x, y)?;
    ds.feature_names = wavelengths.iter().map(|w| format!("{w}")).collect();
    ds.wavelengths = Some(wavelengths);
    ds.ids = Some((0..n).map(|i| format!("s{i:04}")).collect());
    ds.validate()?;
    Ok(ds)
}

/// Inputs uniform in `[-SYNTH_NONLINEAR_BOX, SYNTH_NONLINEAR_BOX]^p`; the response is
/// a Gaussian bump of width [`SYNTH_NONLINEAR_WIDTH`] centered at the origin plus noise.
pub fn synth_nonlinear(n: usize, p: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_synth_sizes(n, p, noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    let two_s2 = 2.0 * SYNTH_NONLINEAR_WIDTH * SYNTH_NONLINEAR_WIDTH;
    for i in 0..n {
        for j in 0..p {
            x[(i, j)] = rng.random_range(-SYNTH_NONLINEAR_BOX..SYNTH_NONLINEAR_BOX);
        }
        let r2: f64 = x.row(i).iter().map(|v| v * v).sum();
        y[i] = (-r2 / two_s2).exp() + noise * rng.sample::<f64, _>(StandardNormal);
    }
    let mut ds = Dataset::new(x, y)?;
    ds.ids = Some((0..n).map(|i| format!("s{i:04}")).collect());
    Ok(ds)
}
