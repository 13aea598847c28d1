//! Kernel principal component regression and kernel partial least squares
//! for spectra, with kernel parameters learned by Kernel Flows.
//!
//! - [`kernels`]: kernel families, kernel matrices, feature-space centering.
//! - [`models`]: K-PCR, K-PLS and linear PCR fitting and prediction.
//! - [`kflow`]: norm-ratio and leave-one-out losses, finite-difference
//!   gradients and the SGD/momentum optimizer.
//! - [`data`]: CSV ingestion, splitting, scaling and synthetic datasets.
//! - [`cli`]: the `kflows` command-line tool.

pub mod cli;
pub mod data;
pub mod error;
pub mod kernels;
pub mod kflow;
pub mod linalg;
pub mod models;
pub mod plot;

pub use error::{Error, Result};
pub use kernels::{KernelFamily, KernelSpec, KernelTerm};
pub use kflow::{KFConfig, TrainingTrace};
pub use models::{FitReport, ModelKind, TrainedModel};
