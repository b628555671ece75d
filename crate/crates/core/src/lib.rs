//! Task-aligned low-dimensional embeddings of multivariate KPI time series.
//!
//! A Transformer encoder feeds a fixed echo-state reservoir; the final
//! reservoir state is concatenated with the flattened input window and
//! mapped linearly to an `n`-dimensional embedding. The encoder is trained
//! against an MLP on the next-step KPI vector by maximizing the H-score,
//! then frozen, and small MLP predictors are fit on the embeddings alone.
//!
//! Modules, bottom-up:
//!
//! - [`ndiff`]: tensors and reverse-mode differentiation
//! - [`hscore`]: the H-score objective
//! - [`models`]: Transformer, reservoir, readout, MLPs, checkpoints
//! - [`preprocess`]: KPI log ingestion through sequence construction
//! - [`synthdata`]: latent-factor KPI stream generator
//! - [`pipeline`]: two-stage training, baselines, metrics, sweeps
//! - [`config`]: declarative run configuration

pub mod config;
pub mod error;
pub mod hscore;
pub mod kpi;
pub mod models;
pub mod ndiff;
pub mod pipeline;
pub mod preprocess;
pub mod synthdata;

pub use error::{Error, Result};
