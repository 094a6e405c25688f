//! Multi-modal fusion of satellite image time series and very high
//! resolution patches.
//!
//! A GRU with attention pooling encodes each pixel's time series, a small
//! multi-resolution CNN encodes the surrounding image patch, and three
//! softmax heads (one per branch plus one on the concatenated features) are
//! trained jointly. Prediction uses the fused head only.

pub mod checkpoint;
pub mod cnn;
pub mod data;
pub mod error;
pub mod fusion;
pub mod grad;
pub mod gradsuite;
pub mod metrics;
pub mod rnn;
pub mod train;

mod init;

pub use error::{Error, Result};
