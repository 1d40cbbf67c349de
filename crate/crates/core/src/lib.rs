//! Velocity-aligned channel embeddings for multivariate time-series anomaly
//! detection.
//!
//! A channel-aware convolutional encoder maps overlapping patches to an
//! embedding trajectory and is trained so that the trajectory moves in a
//! locally consistent direction. Test patches are scored by their
//! Mahalanobis distance to the training embeddings combined with how far
//! their velocity strays from a bank of training velocity prototypes.

pub mod encoder;
pub mod error;
pub mod geometry;
pub mod matrix;
pub mod metrics;
pub mod patching;
pub mod pipeline;
pub mod scoring;
pub mod series;
pub mod training;

pub use error::{Result, VaceError};
pub use matrix::Matrix;
