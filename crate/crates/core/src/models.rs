//! Kernel PCR, kernel PLS and linear PCR regression models.
//!
//! All kernel models live in the double-centered kernel space and predict as
//! `K̃_new · b + b0`, where `b` are per-training-sample dual coefficients and
//! `b0` is the training response mean.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Scaler;
use crate::error::{Error, Result};
use crate::kernels::{self, CenteringStats, KernelSpec};
use crate::linalg;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Eigenvalues at or below this fraction of the largest one are treated as zero.
pub const RANK_TOL: f64 = 1e-10;

const PLS_TOL: f64 = 1e-10;
const PLS_MAX_ITER: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Kpcr,
    Kpls,
    LinearPcr,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "kpcr" => Ok(ModelKind::Kpcr),
            "kpls" => Ok(ModelKind::Kpls),
            "linear_pcr" | "pcr" => Ok(ModelKind::LinearPcr),
            other => Err(Error::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

/// A fitted regression model. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainedModel {
    pub schema_version: u32,
    pub kind: ModelKind,
    /// Training spectra (after scaling, if a scaler is attached).
    #[serde(with = "linalg::rows")]
    pub support_x: DMatrix<f64>,
    #[serde(with = "linalg::vector")]
    pub dual_coef: DVector<f64>,
    pub bias: f64,
    /// Absent for linear PCR.
    pub spec: Option<KernelSpec>,
    pub stats: Option<CenteringStats>,
    pub n_components: usize,
    pub response_mean: f64,
    /// Leading eigenvalues of the centered kernel (KPCR) or squared singular
    /// values of the centered spectra (linear PCR). Empty for KPLS.
    pub eigvals: Vec<f64>,
    /// KPCR: eigenvectors scaled by `λ^{-1/2}`. KPLS: dual directions `U`.
    /// Linear PCR: loadings.
    #[serde(with = "linalg::rows")]
    pub scores_basis: DMatrix<f64>,
    /// Linear PCR only: column means of the training spectra.
    pub feature_mean: Option<Vec<f64>>,
    /// Linear PCR only: primal regression coefficients.
    pub coef: Option<Vec<f64>>,
    /// Preprocessing applied to spectra before they reach the model.
    pub scaler: Option<Scaler>,
    /// Name of the response column the model was trained on.
    pub response_column: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub explained_variance_ratio: Vec<f64>,
    pub train_rmse: f64,
    /// `None` when the training response is constant.
    pub train_r2: Option<f64>,
    pub train_predictions: Vec<f64>,
}

/// Dual-space solution shared by model fitting and the kernel-flow losses.
#[derive(Debug, Clone)]
pub(crate) struct DualFit {
    pub dual: DVector<f64>,
    pub eigvals: Vec<f64>,
    pub basis: DMatrix<f64>,
    pub explained: Vec<f64>,
}

/// Splits `y` into its mean and centered values. A constant response gets an
/// exactly zero centered vector.
pub(crate) fn center_response(y: &DVector<f64>) -> (f64, DVector<f64>) {
    let first = y[0];
    if y.iter().all(|&v| v == first) {
        return (first, DVector::zeros(y.len()));
    }
    let mean = y.mean();
    (mean, y.map(|v| v - mean))
}

/// K-PCR on a centered kernel: project onto the leading `h` kernel principal
/// components and regress the centered response on the scores.
pub(crate) fn kpcr_dual(kc: &DMatrix<f64>, yc: &DVector<f64>, h: usize) -> Result<DualFit> {
    let (vals, vecs) = linalg::sym_eigen_desc(kc);
    kpcr_from_eigen(kc, &vals, &vecs, yc, h)
}

pub(crate) fn kpcr_from_eigen(
    kc: &DMatrix<f64>,
    vals: &DVector<f64>,
    vecs: &DMatrix<f64>,
    yc: &DVector<f64>,
    h: usize,
) -> Result<DualFit> {
    let rank = linalg::numerical_rank(vals, RANK_TOL);
    check_components(h, rank, kc.nrows(), "kernel PCR")?;
    let lambda: Vec<f64> = vals.iter().take(h).copied().collect();
    let basis = DMatrix::from_fn(kc.nrows(), h, |i, k| vecs[(i, k)] / lambda[k].sqrt());
    let total: f64 = vals.iter().filter(|&&v| v > 0.0).sum();
    let explained = lambda.iter().map(|l| (l / total).clamp(0.0, 1.0)).collect();
    if yc.iter().all(|&v| v == 0.0) {
        return Ok(DualFit {
            dual: DVector::zeros(kc.nrows()),
            eigvals: lambda,
            basis,
            explained,
        });
    }
    let scores = kc * &basis;
    let latent = linalg::lstsq_qr(&scores, yc)?;
    let dual = &basis * latent;
    Ok(DualFit {
        dual,
        eigvals: lambda,
        basis,
        explained,
    })
}

fn check_components(h: usize, rank: usize, n: usize, what: &str) -> Result<()> {
    if h == 0 {
        return Err(Error::input("number of components must be at least 1"));
    }
    let available = rank.min(n.saturating_sub(1));
    if h > available {
        return Err(Error::Rank {
            context: what.to_string(),
            requested: h,
            available,
        });
    }
    Ok(())
}

/// Kernel PLS (NIPALS form for kernel matrices) on a centered kernel.
pub(crate) fn kpls_dual(kc: &DMatrix<f64>, yc: &DVector<f64>, h: usize) -> Result<DualFit> {
    let n = kc.nrows();
    if h == 0 {
        return Err(Error::input("number of components must be at least 1"));
    }
    if h > n.saturating_sub(1) {
        return Err(Error::Rank {
            context: "kernel PLS".into(),
            requested: h,
            available: n.saturating_sub(1),
        });
    }
    let y_norm0 = yc.norm();
    if y_norm0 == 0.0 {
        return Ok(DualFit {
            dual: DVector::zeros(n),
            eigvals: Vec::new(),
            basis: DMatrix::zeros(n, 0),
            explained: Vec::new(),
        });
    }

    let total_trace = kc.trace();
    let k_scale = kc.norm();
    let mut k = kc.clone();
    let mut y = yc.clone();
    let mut ts: Vec<DVector<f64>> = Vec::with_capacity(h);
    let mut us: Vec<DVector<f64>> = Vec::with_capacity(h);
    let mut explained = Vec::with_capacity(h);

    for comp in 0..h {
        let y_norm = y.norm();
        if y_norm <= 1e-12 * y_norm0 {
            // Response already reproduced exactly; further components add nothing.
            break;
        }
        let mut u = &y / y_norm;
        let mut t_prev: Option<DVector<f64>> = None;
        let mut converged = false;
        let mut t = DVector::zeros(n);
        for _ in 0..PLS_MAX_ITER {
            t = &k * &u;
            let t_norm = t.norm();
            if t_norm.is_nan() || t_norm <= 1e-10 * k_scale {
                return Err(Error::Rank {
                    context: "kernel PLS".into(),
                    requested: h,
                    available: comp,
                });
            }
            t /= t_norm;
            let c = y.dot(&t);
            let u_new = &y * c;
            let u_norm = u_new.norm();
            if u_norm == 0.0 {
                return Err(Error::Rank {
                    context: "kernel PLS".into(),
                    requested: h,
                    available: comp,
                });
            }
            u = u_new / u_norm;
            if let Some(prev) = &t_prev {
                if (&t - prev).norm() < PLS_TOL {
                    converged = true;
                    break;
                }
            }
            t_prev = Some(t.clone());
        }
        if !converged {
            return Err(Error::numeric(format!(
                "kernel PLS component {} did not converge in {PLS_MAX_ITER} iterations",
                comp + 1
            )));
        }

        // K ← (I − t tᵀ) K (I − t tᵀ), y ← y − t tᵀ y
        let kt = &k * &t;
        let tkt = t.dot(&kt);
        let before = k.trace();
        k -= &t * kt.transpose() + &kt * t.transpose();
        k += (&t * t.transpose()) * tkt;
        y -= &t * t.dot(&y);
        explained.push(((before - k.trace()) / total_trace).clamp(0.0, 1.0));
        ts.push(t);
        us.push(u);
    }

    let t_mat = DMatrix::from_columns(&ts);
    let u_mat = DMatrix::from_columns(&us);
    // B = U (Tᵀ K U)⁻¹ Tᵀ y
    let inner = t_mat.transpose() * kc * &u_mat;
    let rhs = t_mat.transpose() * yc;
    let w = inner
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numeric("kernel PLS inner matrix is singular"))?;
    let dual = &u_mat * w;
    if dual.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(
            "kernel PLS produced non-finite coefficients",
        ));
    }
    Ok(DualFit {
        dual,
        eigvals: Vec::new(),
        basis: u_mat,
        explained,
    })
}

fn validate_xy(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::input(format!(
            "spectra have {} rows but response has {} entries",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() < 3 {
        return Err(Error::input(format!(
            "need at least 3 samples, got {}",
            x.nrows()
        )));
    }
    if x.ncols() == 0 {
        return Err(Error::input("spectra have no columns"));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite value in training data"));
    }
    Ok(())
}

fn fit_kernel_model(
    kind: ModelKind,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    spec: &KernelSpec,
    h: usize,
) -> Result<(TrainedModel, FitReport)> {
    validate_xy(x, y)?;
    spec.validate()?;
    let k = kernels::gram_matrix(spec, x);
    let (kc, stats) = kernels::center_train(&k)?;
    let (mean, yc) = center_response(y);
    let fit = match kind {
        ModelKind::Kpcr => kpcr_dual(&kc, &yc, h)?,
        ModelKind::Kpls => kpls_dual(&kc, &yc, h)?,
        ModelKind::LinearPcr => unreachable!(),
    };
    let preds = (&kc * &fit.dual).add_scalar(mean);
    let report = FitReport::new(fit.explained, y, &preds);
    let model = TrainedModel {
        schema_version: MODEL_SCHEMA_VERSION,
        kind,
        support_x: x.clone(),
        dual_coef: fit.dual,
        bias: mean,
        spec: Some(spec.clone()),
        stats: Some(stats),
        n_components: h,
        response_mean: mean,
        eigvals: fit.eigvals,
        scores_basis: fit.basis,
        feature_mean: None,
        coef: None,
        scaler: None,
        response_column: None,
    };
    Ok((model, report))
}

/// Kernel principal component regression with `h` components.
pub fn fit_kpcr(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    spec: &KernelSpec,
    h: usize,
) -> Result<(TrainedModel, FitReport)> {
    fit_kernel_model(ModelKind::Kpcr, x, y, spec, h)
}

/// Kernel partial least squares with `h` latent variables.
pub fn fit_kpls(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    spec: &KernelSpec,
    h: usize,
) -> Result<(TrainedModel, FitReport)> {
    fit_kernel_model(ModelKind::Kpls, x, y, spec, h)
}

/// Classical PCR on column-centered spectra.
pub fn fit_linear_pcr(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    h: usize,
) -> Result<(TrainedModel, FitReport)> {
    validate_xy(x, y)?;
    let mu = linalg::column_means(x);
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= mu.transpose();
    }
    let svd = xc.clone().svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::numeric("SVD did not return singular vectors")),
    };
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal));
    let sq = DVector::from_iterator(s.len(), order.iter().map(|&i| s[i] * s[i]));
    let rank = linalg::numerical_rank(&sq, RANK_TOL);
    check_components(h, rank, x.nrows(), "linear PCR")?;

    let (mean, yc) = center_response(y);
    let loadings = DMatrix::from_fn(x.ncols(), h, |r, k| vt[(order[k], r)]);
    let total: f64 = sq.iter().sum();
    let explained: Vec<f64> = sq
        .iter()
        .take(h)
        .map(|v| (v / total).clamp(0.0, 1.0))
        .collect();
    let latent = if yc.iter().all(|&v| v == 0.0) {
        DVector::zeros(h)
    } else {
        let scores = &xc * &loadings;
        linalg::lstsq_qr(&scores, &yc)?
    };
    let coef = &loadings * &latent;
    let dual = DVector::from_fn(x.nrows(), |i, _| {
        (0..h)
            .map(|k| u[(i, order[k])] * latent[k] / s[order[k]])
            .sum::<f64>()
    });
    let preds = (&xc * &coef).add_scalar(mean);
    let report = FitReport::new(explained, y, &preds);
    let model = TrainedModel {
        schema_version: MODEL_SCHEMA_VERSION,
        kind: ModelKind::LinearPcr,
        support_x: x.clone(),
        dual_coef: dual,
        bias: mean,
        spec: None,
        stats: None,
        n_components: h,
        response_mean: mean,
        eigvals: sq.iter().take(h).copied().collect(),
        scores_basis: loadings,
        feature_mean: Some(mu.iter().copied().collect()),
        coef: Some(coef.iter().copied().collect()),
        scaler: None,
        response_column: None,
    };
    Ok((model, report))
}

/// Fits the requested model kind. `spec` is ignored for linear PCR.
pub fn fit(
    kind: ModelKind,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    spec: &KernelSpec,
    h: usize,
) -> Result<(TrainedModel, FitReport)> {
    match kind {
        ModelKind::Kpcr => fit_kpcr(x, y, spec, h),
        ModelKind::Kpls => fit_kpls(x, y, spec, h),
        ModelKind::LinearPcr => fit_linear_pcr(x, y, h),
    }
}

impl FitReport {
    fn new(explained: Vec<f64>, y: &DVector<f64>, preds: &DVector<f64>) -> Self {
        Self {
            explained_variance_ratio: explained,
            train_rmse: rmse(y.as_slice(), preds.as_slice()).unwrap_or(f64::NAN),
            train_r2: r2(y.as_slice(), preds.as_slice()).ok(),
            train_predictions: preds.iter().copied().collect(),
        }
    }
}

/// Predicts the response for the rows of `x_new`.
pub fn predict(model: &TrainedModel, x_new: &DMatrix<f64>) -> Result<DVector<f64>> {
    model.predict(x_new)
}

impl TrainedModel {
    pub fn predict(&self, x_new: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x_new.ncols() != self.support_x.ncols() {
            return Err(Error::input(format!(
                "model expects {} spectral columns, got {}",
                self.support_x.ncols(),
                x_new.ncols()
            )));
        }
        let scaled;
        let x = match &self.scaler {
            Some(s) => {
                scaled = s.transform(x_new)?;
                &scaled
            }
            None => x_new,
        };
        match self.kind {
            ModelKind::Kpcr | ModelKind::Kpls => {
                let (spec, stats) = match (&self.spec, &self.stats) {
                    (Some(spec), Some(stats)) => (spec, stats),
                    _ => {
                        return Err(Error::input(
                            "kernel model is missing its kernel or centering data",
                        ))
                    }
                };
                let k_new = kernels::kernel_matrix(spec, x, &self.support_x)?;
                let kc_new = kernels::center_test(&k_new, stats)?;
                Ok((kc_new * &self.dual_coef).add_scalar(self.bias))
            }
            ModelKind::LinearPcr => {
                let (mu, coef) = match (&self.feature_mean, &self.coef) {
                    (Some(m), Some(c)) => (m, c),
                    _ => return Err(Error::input("linear model is missing its coefficients")),
                };
                Ok(DVector::from_iterator(
                    x.nrows(),
                    x.row_iter().map(|row| {
                        row.iter()
                            .zip(mu)
                            .zip(coef)
                            .map(|((v, m), c)| (v - m) * c)
                            .sum::<f64>()
                            + self.bias
                    }),
                ))
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization cannot fail")
    }

    /// Parses a model, rejecting documents with a different schema version.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::input(format!("model JSON: {e}")))?;
        let found = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::input("model JSON has no schema_version"))?;
        if found != u64::from(MODEL_SCHEMA_VERSION) {
            return Err(Error::Schema {
                found: found.try_into().unwrap_or(u32::MAX),
                expected: MODEL_SCHEMA_VERSION,
            });
        }
        let model: TrainedModel =
            serde_json::from_value(value).map_err(|e| Error::input(format!("model JSON: {e}")))?;
        if let Some(spec) = &model.spec {
            spec.validate()?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn check_metric_inputs(y_true: &[f64], y_pred: &[f64]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::input(format!(
            "metric inputs have lengths {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.len() < 2 {
        return Err(Error::input("metrics need at least 2 samples"));
    }
    Ok(())
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r2(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_metric_inputs(y_true, y_pred)?;
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 || y_true.iter().all(|&v| v == y_true[0]) {
        return Err(Error::UndefinedMetric(
            "R² is undefined for a constant response".into(),
        ));
    }
    let ss_res: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| (t - p).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_metric_inputs(y_true, y_pred)?;
    let mse = y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| (t - p).powi(2))
        .sum::<f64>()
        / y_true.len() as f64;
    Ok(mse.sqrt())
}
