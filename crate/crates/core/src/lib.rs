//! A desk-scale lab for modality-decoupled adapters on a small autoregressive
//! transformer that models text and image-token sequences in one stream.
//!
//! The crate carries its own reverse-mode autodiff ([`autodiff`]), the
//! backbone, the three adapter families, distillation losses, gradient
//! conflict diagnostics, a continual-tuning harness and the CLI plumbing.

pub mod adapters;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod optim;
pub mod params;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{LabError, LabResult};
