//! A dual-stream residual-decreasing boosting architecture for multivariate
//! time-series forecasting, built on a minimal f64 reverse-mode autodiff
//! engine, together with a numerical lab that checks the bias/variance and
//! ensemble-variance results the design rests on.
//!
//! The crate is organized around the data flow of a forecasting run:
//!
//! * [`tensor`] — dense n-d arrays and the computation graph used for
//!   training.
//! * [`data`] — CSV ingestion, chronological splits, sliding windows and
//!   reversible per-instance normalization.
//! * [`learners`] — attention (time- and frequency-domain), feed-forward and
//!   gating building blocks.
//! * [`backbone`] — the boosting backbone: residual-decreasing input stream,
//!   alternating-subtraction output stream, per-block traces and the
//!   telescoping decomposition.
//! * [`training`] — Adam, MSE training with early stopping, evaluation.
//! * [`metrics`] — the seven forecasting metrics.
//! * [`theory`] — closed forms and Monte-Carlo checks for the ensemble
//!   bias/variance claims.

pub mod backbone;
pub mod data;
pub mod learners;
pub mod metrics;
pub mod tensor;
pub mod theory;
pub mod training;

pub use tensor::{Graph, Tensor, TensorError, TensorId};
