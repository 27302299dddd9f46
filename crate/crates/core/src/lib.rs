//! Layer-wise interference-minimization model merging.
//!
//! The crate merges fine-tuned checkpoints that share a pretrained
//! initialization. Besides the usual data-free baselines (averaging, task
//! arithmetic, Iso-C, TSV) it implements the closed-form interference
//! minimizer `W* = (Σ W_t C_t)(Σ C_t)^†` both with empirical input second
//! moments (RegMean) and with the data-free estimate `C_t ≈ Δ_tᵀΔ_t`
//! (ACTMat), where `Δ_t` is the task's difference matrix.
//!
//! Modules:
//! - [`tensor_store`]: checkpoint container I/O and task vectors.
//! - [`linalg`]: SVD, pseudoinverse, Frobenius geometry.
//! - [`cov`]: empirical and task-vector covariance estimates, κ factors.
//! - [`merge`]: the six merge rules and the checkpoint-level driver.
//! - [`diagnostics`]: covariance-estimation error terms and the
//!   negative-transfer bound.
//! - [`toy`]: small MLP scenarios trained with full-batch gradient descent.
//! - [`bench`], [`flops`], [`config`], [`verify`]: command-line support.

pub mod bench;
pub mod config;
pub mod cov;
pub mod diagnostics;
pub mod error;
pub mod flops;
pub mod linalg;
pub mod merge;
pub mod stats;
pub mod tensor_store;
pub mod toy;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use tensor_store::{Checkpoint, DType, TaskVector, Tensor};
