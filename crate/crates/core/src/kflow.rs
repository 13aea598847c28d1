//! Kernel Flows: learning kernel parameters by stochastic gradient descent on
//! a cross-validation style loss.
//!
//! Two losses are available. The norm-ratio loss compares the RKHS norm of
//! the interpolant fitted on a random batch with the norms of interpolants
//! fitted on sub-batches. The leave-one-out loss sums the absolute
//! prediction errors of K-PCR (or K-PLS) models refitted with each batch
//! sample held out. Gradients are central finite differences in log-parameter
//! space.

use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, KernelSpec};
use crate::linalg;
use crate::models::{self, center_response};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    NormRatio,
    LooPredictionError,
}

/// Which regression weights a loss is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowModel {
    Kpcr,
    Kpls,
    /// Kernel interpolation weights `(K + jitter·I)⁻¹ y`.
    GprWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Momentum {
    None,
    /// Heavy-ball momentum with coefficient γ.
    Polyak(f64),
    /// Nesterov accelerated gradient with coefficient γ.
    Nesterov(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KFConfig {
    pub loss: LossKind,
    pub model_kind: FlowModel,
    pub iterations: usize,
    /// Samples drawn per iteration.
    pub batch_size: usize,
    /// Norm-ratio only.
    pub subbatch_count: usize,
    /// Norm-ratio only: sub-batch size as a fraction of the batch.
    pub subbatch_fraction: f64,
    pub learning_rate: f64,
    pub momentum: Momentum,
    /// Central-difference step in log-parameter space.
    pub fd_step: f64,
    /// Relative jitter for the interpolation solves: `jitter · trace(K)/N` is added to the diagonal.
    pub jitter: f64,
    pub rng_seed: u64,
    pub n_components: usize,
    /// When false only the log-widths move.
    pub learn_amplitudes: bool,
    /// Record wall-clock time per iteration. Off by default so traces are reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for KFConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::LooPredictionError,
            model_kind: FlowModel::Kpcr,
            iterations: 100,
            batch_size: 32,
            subbatch_count: 4,
            subbatch_fraction: 0.5,
            learning_rate: 0.01,
            momentum: Momentum::None,
            fd_step: 1e-4,
            jitter: 1e-8,
            rng_seed: 0,
            n_components: 1,
            learn_amplitudes: true,
            record_timing: false,
        }
    }
}

impl KFConfig {
    /// Checks the configuration against a dataset of `n_samples` rows.
    pub fn validate(&self, n_samples: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size > n_samples {
            return bad(format!(
                "batch_size {} exceeds the {n_samples} available samples",
                self.batch_size
            ));
        }
        if self.batch_size < 3 {
            return bad(format!(
                "batch_size must be at least 3, got {}",
                self.batch_size
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be nonnegative, got {}",
                self.learning_rate
            ));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return bad(format!("fd_step must be positive, got {}", self.fd_step));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad(format!("jitter must be nonnegative, got {}", self.jitter));
        }
        if self.n_components == 0 {
            return bad("n_components must be at least 1".into());
        }
        match self.momentum {
            Momentum::Polyak(g) | Momentum::Nesterov(g) if !(0.0..1.0).contains(&g) => {
                return bad(format!("momentum coefficient must be in [0, 1), got {g}"));
            }
            _ => {}
        }
        match self.loss {
            LossKind::LooPredictionError => {
                if self.model_kind == FlowModel::GprWeights {
                    return bad("the leave-one-out loss needs model_kind kpcr or kpls".into());
                }
                if self.n_components > self.batch_size - 2 {
                    return bad(format!(
                        "n_components {} too large for leave-one-out folds of {} samples",
                        self.n_components,
                        self.batch_size - 1
                    ));
                }
            }
            LossKind::NormRatio => {
                if !(self.subbatch_fraction > 0.0 && self.subbatch_fraction < 1.0) {
                    return bad(format!(
                        "subbatch_fraction must be in (0, 1), got {}",
                        self.subbatch_fraction
                    ));
                }
                let size = self.subbatch_size();
                if size < 2 {
                    return bad(format!(
                        "sub-batches of {size} samples are too small (need at least 2)"
                    ));
                }
                if self.subbatch_count == 0 {
                    return bad("subbatch_count must be at least 1".into());
                }
                if self.model_kind != FlowModel::GprWeights && self.n_components > size - 1 {
                    return bad(format!(
                        "n_components {} too large for sub-batches of {size} samples",
                        self.n_components
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn subbatch_size(&self) -> usize {
        (self.subbatch_fraction * self.batch_size as f64).round() as usize
    }
}

fn check_batch(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::input(format!(
            "batch has {} spectra and {} responses",
            x.nrows(),
            y.len()
        )));
    }
    Ok(())
}

fn fold_dual(
    kind: FlowModel,
    kc: &DMatrix<f64>,
    yc: &DVector<f64>,
    h: usize,
) -> Result<DVector<f64>> {
    let fit = match kind {
        FlowModel::Kpcr => models::kpcr_dual(kc, yc, h)?,
        FlowModel::Kpls => models::kpls_dual(kc, yc, h)?,
        FlowModel::GprWeights => unreachable!("GPR weights are not a latent-variable model"),
    };
    Ok(fit.dual)
}

/// Sum over the batch of `|y_n − ŷ_n|`, where `ŷ_n` comes from a model fitted
/// on every other batch sample.
pub fn loo_loss(
    spec: &KernelSpec,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    h: usize,
    model_kind: FlowModel,
) -> Result<f64> {
    check_batch(x, y)?;
    let n = x.nrows();
    if n < 3 {
        return Err(Error::input(format!(
            "leave-one-out needs at least 3 samples, got {n}"
        )));
    }
    if model_kind == FlowModel::GprWeights {
        return Err(Error::Config(
            "the leave-one-out loss needs model_kind kpcr or kpls".into(),
        ));
    }
    if h == 0 || h > n - 2 {
        return Err(Error::Rank {
            context: format!("leave-one-out folds of {} samples", n - 1),
            requested: h,
            available: n - 2,
        });
    }
    let k = kernels::gram_matrix(spec, x);
    let residuals: Vec<Result<f64>> = (0..n)
        .into_par_iter()
        .map(|held| {
            let idx: Vec<usize> = (0..n).filter(|&i| i != held).collect();
            let k_train = k.select_rows(&idx).select_columns(&idx);
            let (kc, stats) = kernels::center_train(&k_train)?;
            let y_train = DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i]));
            let (mean, yc) = center_response(&y_train);
            let dual = fold_dual(model_kind, &kc, &yc, h).map_err(|e| match e {
                Error::Rank {
                    requested,
                    available,
                    context,
                } => Error::Rank {
                    context: format!("{context} in fold {held}"),
                    requested,
                    available,
                },
                other => other,
            })?;
            let k_row = DMatrix::from_fn(1, idx.len(), |_, j| k[(held, idx[j])]);
            let kc_row = kernels::center_test(&k_row, &stats)?;
            let pred = (kc_row * dual)[0] + mean;
            if !pred.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite prediction in fold {held}"
                )));
            }
            Ok((y[held] - pred).abs())
        })
        .collect();
    let mut total = 0.0;
    for r in residuals {
        total += r?;
    }
    Ok(total)
}

/// RKHS norm² of the regression weights for the samples `idx` of a batch kernel.
fn weight_norm(
    k_batch: &DMatrix<f64>,
    y_batch: &DVector<f64>,
    idx: &[usize],
    kind: FlowModel,
    h: usize,
    jitter: f64,
) -> Result<f64> {
    let k = k_batch.select_rows(idx).select_columns(idx);
    let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| y_batch[i]));
    match kind {
        FlowModel::GprWeights => {
            let mut a = k;
            let shift = jitter * a.trace() / idx.len() as f64;
            for i in 0..idx.len() {
                a[(i, i)] += shift;
            }
            let b = linalg::solve_spd(&a, &y).ok_or_else(|| {
                Error::numeric(format!(
                    "kernel matrix of {} samples is singular; increase jitter (currently {jitter:e})",
                    idx.len()
                ))
            })?;
            Ok(b.dot(&(&a * &b)))
        }
        FlowModel::Kpcr | FlowModel::Kpls => {
            let (kc, _) = kernels::center_train(&k)?;
            let (_, yc) = center_response(&y);
            let b = fold_dual(kind, &kc, &yc, h)?;
            Ok(b.dot(&(&kc * &b)))
        }
    }
}

/// Original Kernel Flows loss `mean_s (1 − n_s / n_b)` over the given sub-batches.
///
/// `subbatches` holds row indices into the batch. `jitter` is relative to the
/// mean kernel diagonal and only affects `GprWeights`; `h` only affects the
/// latent-variable models.
pub fn norm_ratio_loss(
    spec: &KernelSpec,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    subbatches: &[Vec<usize>],
    model_kind: FlowModel,
    h: usize,
    jitter: f64,
) -> Result<f64> {
    check_batch(x, y)?;
    let n = x.nrows();
    if subbatches.is_empty() {
        return Err(Error::input("norm-ratio loss needs at least one sub-batch"));
    }
    for (s, sb) in subbatches.iter().enumerate() {
        if sb.len() < 2 || sb.len() > n {
            return Err(Error::input(format!(
                "sub-batch {s} has {} samples; need 2..={n}",
                sb.len()
            )));
        }
        let mut seen = vec![false; n];
        for &i in sb {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::input(format!(
                    "sub-batch {s} has an invalid or repeated index {i}"
                )));
            }
        }
    }
    let k = kernels::gram_matrix(spec, x);
    let all: Vec<usize> = (0..n).collect();
    let n_b = weight_norm(&k, y, &all, model_kind, h, jitter)?;
    if n_b.is_nan() || n_b <= 0.0 || n_b.is_infinite() {
        return Err(Error::numeric(format!(
            "batch weight norm is {n_b}; need a positive value"
        )));
    }
    let ratios: Vec<Result<f64>> = subbatches
        .par_iter()
        .map(|sb| Ok(1.0 - weight_norm(&k, y, sb, model_kind, h, jitter)? / n_b))
        .collect();
    let mut total = 0.0;
    for r in ratios {
        total += r?;
    }
    Ok(total / subbatches.len() as f64)
}

/// Central-difference gradient `(f(θ + h e_j) − f(θ − h e_j)) / 2h`.
pub fn fd_gradient<F>(loss: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    fd_gradient_masked(loss, theta, h, None)
}

/// As [`fd_gradient`], leaving coordinates with `mask[j] == false` at zero
/// without evaluating them.
pub fn fd_gradient_masked<F>(
    loss: F,
    theta: &[f64],
    h: f64,
    mask: Option<&[bool]>,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::input(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let active: Vec<usize> = (0..theta.len())
        .filter(|&j| mask.is_none_or(|m| m[j]))
        .collect();
    let evals: Vec<Result<f64>> = active
        .par_iter()
        .flat_map_iter(|&j| [(j, h), (j, -h)])
        .map(|(j, step)| {
            let mut t = theta.to_vec();
            t[j] += step;
            let v = loss(&t)?;
            if !v.is_finite() {
                return Err(Error::numeric(format!(
                    "loss is {v} at the {} perturbation of coordinate {j}",
                    if step > 0.0 { "positive" } else { "negative" }
                )));
            }
            Ok(v)
        })
        .collect();
    let mut grad = vec![0.0; theta.len()];
    let mut it = evals.into_iter();
    for &j in &active {
        let plus = it.next().expect("two evaluations per coordinate")?;
        let minus = it.next().expect("two evaluations per coordinate")?;
        grad[j] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// One-based iteration index.
    pub iter: usize,
    pub loss: f64,
    /// Parameters at which the loss and gradient were taken.
    pub theta: Vec<f64>,
    pub grad: Vec<f64>,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub n_params: usize,
    pub records: Vec<TraceRecord>,
}

impl TrainingTrace {
    pub fn new(n_params: usize) -> Self {
        Self {
            n_params,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Running minimum of the recorded losses.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.records
            .iter()
            .scan(f64::INFINITY, |best, r| {
                *best = best.min(r.loss);
                Some(*best)
            })
            .collect()
    }

    /// CSV with columns `iter,loss,theta_0..,grad_0..,ms`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loss");
        for j in 0..self.n_params {
            out.push_str(&format!(",theta_{j}"));
        }
        for j in 0..self.n_params {
            out.push_str(&format!(",grad_{j}"));
        }
        out.push_str(",ms\n");
        for r in &self.records {
            out.push_str(&format!("{},{}", r.iter, r.loss));
            for v in r.theta.iter().chain(&r.grad) {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", r.ms));
        }
        out
    }
}

/// Optimization failure, with the iterations completed before it.
#[derive(Debug)]
pub struct OptimizeError {
    pub error: Error,
    pub trace: TrainingTrace,
}

impl fmt::Display for OptimizeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} iterations)", self.error, self.trace.len())
    }
}

impl std::error::Error for OptimizeError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// A batch drawn for one iteration.
struct Batch {
    x: DMatrix<f64>,
    y: DVector<f64>,
    subbatches: Vec<Vec<usize>>,
}

impl Batch {
    fn draw(x: &DMatrix<f64>, y: &DVector<f64>, config: &KFConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut perm: Vec<usize> = (0..x.nrows()).collect();
        perm.shuffle(rng);
        perm.truncate(config.batch_size);
        let subbatches = match config.loss {
            LossKind::NormRatio => (0..config.subbatch_count)
                .map(|_| {
                    let mut s: Vec<usize> = (0..config.batch_size).collect();
                    s.shuffle(rng);
                    s.truncate(config.subbatch_size());
                    s.sort_unstable();
                    s
                })
                .collect(),
            LossKind::LooPredictionError => Vec::new(),
        };
        Self {
            x: x.select_rows(&perm),
            y: DVector::from_iterator(perm.len(), perm.iter().map(|&i| y[i])),
            subbatches,
        }
    }

    fn loss(&self, spec: &KernelSpec, config: &KFConfig) -> Result<f64> {
        match config.loss {
            LossKind::LooPredictionError => loo_loss(
                spec,
                &self.x,
                &self.y,
                config.n_components,
                config.model_kind,
            ),
            LossKind::NormRatio => norm_ratio_loss(
                spec,
                &self.x,
                &self.y,
                &self.subbatches,
                config.model_kind,
                config.n_components,
                config.jitter,
            ),
        }
    }
}

/// Learns kernel parameters with Kernel Flows, starting from `spec0`.
///
/// Every iteration draws a batch from a fresh seeded permutation, evaluates
/// the configured loss and its finite-difference gradient on that batch, and
/// takes one (momentum) gradient step on the log-parameters.
pub fn optimize(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    spec0: &KernelSpec,
    config: &KFConfig,
) -> std::result::Result<(KernelSpec, TrainingTrace), OptimizeError> {
    let mut trace = TrainingTrace::new(spec0.n_params());
    macro_rules! bail {
        ($e:expr) => {
            return Err(OptimizeError {
                error: $e,
                trace,
            })
        };
    }
    if let Err(e) = check_batch(x, y).and_then(|_| spec0.validate()) {
        bail!(e);
    }
    if let Err(e) = config.validate(x.nrows()) {
        bail!(e);
    }

    let mask: Vec<bool> = (0..spec0.n_params())
        .map(|j| config.learn_amplitudes || j % 2 == 0)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut theta = spec0.params();
    let mut velocity = vec![0.0; theta.len()];

    for i in 0..config.iterations {
        let start = Instant::now();
        let batch = Batch::draw(x, y, config, &mut rng);
        let loss_at = |t: &[f64]| -> Result<f64> { batch.loss(&spec0.with_params(t)?, config) };

        let loss = match loss_at(&theta) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => bail!(Error::numeric(format!(
                "loss is {v} at iteration {}",
                i + 1
            ))),
            Err(e) => bail!(e),
        };
        let probe: Vec<f64> = match config.momentum {
            Momentum::Nesterov(g) => theta
                .iter()
                .zip(&velocity)
                .map(|(t, v)| t + g * v)
                .collect(),
            _ => theta.clone(),
        };
        let grad = match fd_gradient_masked(loss_at, &probe, config.fd_step, Some(&mask)) {
            Ok(g) => g,
            Err(e) => bail!(e),
        };

        let record_theta = theta.clone();
        let alpha = config.learning_rate;
        match config.momentum {
            Momentum::None => {
                for (t, g) in theta.iter_mut().zip(&grad) {
                    *t -= alpha * g;
                }
            }
            Momentum::Polyak(gamma) | Momentum::Nesterov(gamma) => {
                for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                    *v = gamma * *v - alpha * g;
                    *t += *v;
                }
            }
        }
        if theta.iter().any(|t| !t.is_finite()) {
            bail!(Error::numeric(format!(
                "parameters diverged at iteration {}",
                i + 1
            )));
        }
        trace.records.push(TraceRecord {
            iter: i + 1,
            loss,
            theta: record_theta,
            grad,
            ms: if config.record_timing {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        });
    }

    match spec0.with_params(&theta) {
        Ok(spec) => Ok((spec, trace)),
        Err(e) => Err(OptimizeError { error: e, trace }),
    }
}
