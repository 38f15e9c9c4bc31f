//! Desk-scale federated learning with mutual teacher/student distillation
//! on each client and low-rank compressed updates on the wire.
//!
//! The pieces, bottom up:
//! - [`tensor`], [`nn`]: dense tensors, a reverse-mode tape, MLP and small CNN models.
//! - [`linalg`]: thin SVD.
//! - [`synkd`]: the client-side distillation losses and local update.
//! - [`dpd`]: update decomposition and the binary wire format.
//! - [`data`]: datasets, the PRDS file format and non-IID partitioners.
//! - [`fedsim`]: round orchestration for PRFL and the FedAvg / Local baselines.
//! - [`exp`]: configuration files, run directories and reports.

pub mod data;
pub mod dpd;
pub mod error;
pub mod exec;
pub mod exp;
pub mod fedsim;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod synkd;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Executor;
pub use exp::config::{ExperimentConfig, Strategy};
pub use tensor::Tensor;
