//! Desk-scale laboratory for bottleneck-space steering of conditional
//! diffusion models: pretrain small denoisers on deliberately biased
//! synthetic populations, learn dual bottleneck transformations with an
//! alternating score-matching procedure, and audit fairness, safety, and
//! fidelity with exact oracle classifiers.

pub mod config;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod persist;
pub mod pipeline;
pub mod report;
pub mod schedule;
pub mod scorenet;
pub mod steering;
pub mod train;
pub mod worlds;

pub use error::{Result, SteerError};
