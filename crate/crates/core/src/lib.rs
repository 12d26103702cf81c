//! A desk-scale laboratory for resource-constrained transformers.
//!
//! The crate trains and probes a small decoder-style language model whose
//! computation is treated as a scarce resource: attention budgets and
//! activation taxes constrain it at inference or during training, and a
//! set of allocation metrics (Gini, entropy, FLOP counts, sparsity)
//! quantifies the strategies the model adopts in response.
//!
//! Layering, bottom up:
//! - [`autodiff`]: dense tensors and a single-pass reverse-mode tape.
//! - [`model`]: the traced transformer and its checkpoint format.
//! - [`constraints`]: inference-time attention budgets and penalties.
//! - [`economics`]: cost terms, allocation metrics, FLOP accounting.
//! - [`training`]: the incentive-weighted training loop and evaluation.
//! - [`tasks`]: synthetic recall/classification data and byte-level text.
//! - [`harness`]: experiment configs, sweeps, reports, and charts.

pub mod autodiff;
pub mod constraints;
pub mod economics;
pub mod error;
pub mod harness;
pub mod model;
pub mod stats;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
