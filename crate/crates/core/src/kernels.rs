//! Kernel functions, kernel-matrix assembly and feature-space centering.
//!
//! Every kernel is a weighted sum of radial families evaluated on the
//! Euclidean distance between two spectra. Widths and amplitudes are stored
//! as logarithms so that any real parameter vector maps to a valid kernel.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

const SQRT_3: f64 = 1.732_050_807_568_877_2;
const SQRT_5: f64 = 2.236_067_977_499_79;

/// A closed-form radial kernel family with a single width parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
    Cauchy,
    Matern12,
    Matern32,
    Matern52,
    /// Plain inner product `x·y`; not radial, ignores the width. Test oracle only.
    #[cfg(feature = "linear-kernel")]
    Linear,
}

impl KernelFamily {
    /// The five radial families.
    pub const ALL: [KernelFamily; 5] = [
        KernelFamily::Gaussian,
        KernelFamily::Cauchy,
        KernelFamily::Matern12,
        KernelFamily::Matern32,
        KernelFamily::Matern52,
    ];

    /// Evaluates the unit-amplitude family at squared distance `d2` and width `sigma`.
    #[inline]
    pub fn eval_sq_dist(self, d2: f64, sigma: f64) -> f64 {
        match self {
            KernelFamily::Gaussian => (-d2 / (2.0 * sigma * sigma)).exp(),
            KernelFamily::Cauchy => 1.0 / (1.0 + d2 / (sigma * sigma)),
            KernelFamily::Matern12 => (-d2.sqrt() / sigma).exp(),
            KernelFamily::Matern32 => {
                let s = SQRT_3 * d2.sqrt() / sigma;
                (1.0 + s) * (-s).exp()
            }
            KernelFamily::Matern52 => {
                let s = SQRT_5 * d2.sqrt() / sigma;
                (1.0 + s + 5.0 * d2 / (3.0 * sigma * sigma)) * (-s).exp()
            }
            #[cfg(feature = "linear-kernel")]
            KernelFamily::Linear => unreachable!("linear kernel is not radial"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Cauchy => "cauchy",
            KernelFamily::Matern12 => "matern12",
            KernelFamily::Matern32 => "matern32",
            KernelFamily::Matern52 => "matern52",
            #[cfg(feature = "linear-kernel")]
            KernelFamily::Linear => "linear",
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "rbf" => Ok(KernelFamily::Gaussian),
            "cauchy" => Ok(KernelFamily::Cauchy),
            "matern12" | "matern1/2" => Ok(KernelFamily::Matern12),
            "matern32" | "matern3/2" => Ok(KernelFamily::Matern32),
            "matern52" | "matern5/2" => Ok(KernelFamily::Matern52),
            other => Err(Error::input(format!("unknown kernel family '{other}'"))),
        }
    }
}

/// One summand of a [`KernelSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelTerm {
    pub family: KernelFamily,
    pub log_width: f64,
    #[serde(default)]
    pub log_amplitude: f64,
}

impl KernelTerm {
    pub fn new(family: KernelFamily, log_width: f64, log_amplitude: f64) -> Self {
        Self {
            family,
            log_width,
            log_amplitude,
        }
    }

    pub fn width(&self) -> f64 {
        self.log_width.exp()
    }

    pub fn amplitude(&self) -> f64 {
        self.log_amplitude.exp()
    }
}

/// A kernel built as a nonnegative weighted sum of families.
///
/// The learnable parameter vector is `[log_width_0, log_amplitude_0, log_width_1, ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    terms: Vec<KernelTerm>,
}

impl KernelSpec {
    pub fn new(terms: Vec<KernelTerm>) -> Result<Self> {
        let spec = Self { terms };
        spec.validate()?;
        Ok(spec)
    }

    /// A single-family kernel with the given width and unit amplitude.
    pub fn single(family: KernelFamily, width: f64) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::input(format!(
                "kernel width must be positive, got {width}"
            )));
        }
        Self::new(vec![KernelTerm::new(family, width.ln(), 0.0)])
    }

    /// All five families with every log-parameter at zero (width 1, amplitude 1).
    pub fn unit_combination() -> Self {
        Self {
            terms: KernelFamily::ALL
                .iter()
                .map(|&f| KernelTerm::new(f, 0.0, 0.0))
                .collect(),
        }
    }

    /// Checks the invariants; needed after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::input("kernel spec needs at least one term"));
        }
        for (i, t) in self.terms.iter().enumerate() {
            if !t.log_width.is_finite() || !t.log_amplitude.is_finite() {
                return Err(Error::input(format!(
                    "kernel term {i} has non-finite parameters"
                )));
            }
        }
        Ok(())
    }

    pub fn terms(&self) -> &[KernelTerm] {
        &self.terms
    }

    pub fn n_params(&self) -> usize {
        2 * self.terms.len()
    }

    pub fn params(&self) -> Vec<f64> {
        self.terms
            .iter()
            .flat_map(|t| [t.log_width, t.log_amplitude])
            .collect()
    }

    /// Returns a copy with parameters replaced by `theta`.
    pub fn with_params(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.n_params() {
            return Err(Error::input(format!(
                "parameter vector has length {}, kernel expects {}",
                theta.len(),
                self.n_params()
            )));
        }
        let terms = self
            .terms
            .iter()
            .zip(theta.chunks_exact(2))
            .map(|(t, p)| KernelTerm::new(t.family, p[0], p[1]))
            .collect();
        Self::new(terms)
    }

    /// Kernel value for two equal-length vectors. No dimension check.
    #[inline]
    pub fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut d2 = None;
        let mut acc = 0.0;
        for t in &self.terms {
            #[cfg(feature = "linear-kernel")]
            if t.family == KernelFamily::Linear {
                let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                acc += t.amplitude() * dot;
                continue;
            }
            let d2 = *d2.get_or_insert_with(|| squared_distance(x, y));
            acc += t.amplitude() * t.family.eval_sq_dist(d2, t.width());
        }
        acc
    }
}

/// `Σ (x_i − y_i)²`, computed term by term so it never goes negative.
#[inline]
pub fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum::<f64>()
        .max(0.0)
}

pub fn eval_kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::input(format!(
            "kernel arguments have dimensions {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::input("kernel arguments must have dimension >= 1"));
    }
    Ok(spec.eval_unchecked(x, y))
}

/// Row-major copy of a matrix, so that rows are contiguous slices.
fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Kernel matrix between the rows of `a` (M×P) and the rows of `b` (N×P).
pub fn kernel_matrix(
    spec: &KernelSpec,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::input(format!(
            "kernel matrix operands have {} and {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    if std::ptr::eq(a, b) {
        return Ok(gram_matrix(spec, a));
    }
    let p = a.ncols();
    let (m, n) = (a.nrows(), b.nrows());
    let ar = row_major(a);
    let br = row_major(b);
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let xi = &ar[i * p..(i + 1) * p];
            (0..n)
                .map(|j| spec.eval_unchecked(xi, &br[j * p..(j + 1) * p]))
                .collect()
        })
        .collect();
    Ok(DMatrix::from_fn(m, n, |i, j| rows[i][j]))
}

/// Symmetric kernel matrix of the rows of `a`, evaluating each unordered pair once.
pub fn gram_matrix(spec: &KernelSpec, a: &DMatrix<f64>) -> DMatrix<f64> {
    let p = a.ncols();
    let n = a.nrows();
    let ar = row_major(a);
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &ar[i * p..(i + 1) * p];
            (i..n)
                .map(|j| spec.eval_unchecked(xi, &ar[j * p..(j + 1) * p]))
                .collect()
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| {
        if i <= j {
            upper[i][j - i]
        } else {
            upper[j][i - j]
        }
    })
}

/// What test-time centering needs to know about the training kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteringStats {
    pub n_train: usize,
    #[serde(with = "linalg::rows")]
    pub train_kernel: DMatrix<f64>,
    /// Column means of the raw training kernel.
    #[serde(with = "linalg::vector")]
    pub train_row_mean: DVector<f64>,
}

/// Double-centers a training kernel: `(I − J/N) K (I − J/N)`.
pub fn center_train(k: &DMatrix<f64>) -> Result<(DMatrix<f64>, CenteringStats)> {
    if !k.is_square() {
        return Err(Error::input(format!(
            "training kernel must be square, got {}x{}",
            k.nrows(),
            k.ncols()
        )));
    }
    if k.is_empty() {
        return Err(Error::input("training kernel is empty"));
    }
    let scale = k.amax();
    let asym = (k - k.transpose()).amax();
    if asym.is_nan() || asym > 1e-12 * scale {
        return Err(Error::input(format!(
            "training kernel is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let stats = CenteringStats {
        n_train: k.nrows(),
        train_kernel: k.clone(),
        train_row_mean: linalg::column_means(k),
    };
    // Same arithmetic path as test-time centering, so the two agree exactly.
    let centered = center_test(k, &stats)?;
    Ok((centered, stats))
}

/// Centers a test kernel (rows: new samples, columns: training samples)
/// against the stored training statistics:
/// `(K_new − (1/N)·J·K_train) · (I − J/N)`.
pub fn center_test(k_new: &DMatrix<f64>, stats: &CenteringStats) -> Result<DMatrix<f64>> {
    let n = stats.n_train;
    if k_new.ncols() != n {
        return Err(Error::input(format!(
            "test kernel has {} columns, training set has {n} samples",
            k_new.ncols()
        )));
    }
    let mut out = k_new.clone();
    for mut row in out.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(stats.train_row_mean.iter()) {
            *v -= m;
        }
        let mean = row.sum() / n as f64;
        for v in row.iter_mut() {
            *v -= mean;
        }
    }
    Ok(out)
}
