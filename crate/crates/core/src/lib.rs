//! Multimodal contrastive learning with an information-bottleneck
//! regulariser, on synthetic worlds whose shared and modality-specific
//! factors are known exactly.
//!
//! Layers, bottom up:
//!
//! - [`autodiff`]: a reverse-mode tape over small dense tensors.
//! - [`datasets`]: factored worlds, scenarios and paired batches.
//! - [`encoders`]: MLP encoders for both modalities plus a temperature.
//! - [`losses`]: symmetric InfoNCE, the paired-distance regulariser and
//!   their combination.
//! - [`metrics`]: HSIC/CKA alignment and linear-probe information.
//! - [`training`]: Adam with step decay and frozen-encoder evaluation.
//! - [`experiment`]: sweep runner, CSV rows, aggregates and SVG plots.

pub mod autodiff;
pub mod datasets;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
