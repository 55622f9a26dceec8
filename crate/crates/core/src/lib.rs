//! Graph-attentive recurrent networks (GARNN) for multivariate time-series
//! forecasting, with variable importance read directly off the attention
//! keys.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: tensors, a define-by-run tape and a finite-difference checker.
//! * [`model`]: embeddings, GAT/GATv2 layers over a complete variable graph, GRU, MLP head.
//! * [`data`]: CSV ingest, normalisation, sliding windows, synthetic CGM-style records.
//! * [`training`]: the L2-regularised squared-error objective and an Adam loop with early stopping.
//! * [`interpret`]: per-timestep importance, dataset rankings, feature maps, gap bounds.
//! * [`metrics`]: RMSE, MAE, MAPE, glucose-specific RMSE and time lag.

pub mod autodiff;
pub mod data;
mod error;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
