//! Cognition-aware egocentric forecasting.
//!
//! The crate jointly forecasts body-frame trajectory, head rotation and a
//! scalar perceived path uncertainty from multimodal egocentric streams. It
//! ships the full stack needed to train and evaluate that model on a CPU:
//!
//! * [`geometry`]: 6D rotations, body-frame kinematics, goal encoding.
//! * [`autodiff`]: dense tensors with a reverse-mode tape.
//! * [`episodes`]: ingestion, synchronisation, windowing and a synthetic
//!   wayfinding generator.
//! * [`model`]: the multimodal forecaster and an early-fusion baseline network.
//! * [`training`]: losses, AdamW, warm-up + cosine schedule, training loop.
//! * [`baselines`]: constant velocity, linear extrapolation, entropy proxy and
//!   path-feature regressor.
//! * [`metrics`]: displacement, rotation, uncertainty and behaviour metrics.

pub mod autodiff;
pub mod baselines;
pub mod episodes;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
