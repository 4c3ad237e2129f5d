//! Normalization-layer laboratory built around window statistics.
//!
//! The crate provides a small dense-tensor engine with reverse-mode
//! differentiation, spatial window/block sampling, batch/instance/window
//! normalization layers with statistic mixing, the twice-forward
//! consistency trainer, evaluation metrics, and a synthetic multi-site
//! shape benchmark for out-of-distribution experiments.

pub mod bench;
pub mod data;
pub mod error;
pub(crate) mod kernels;
pub mod losses;
pub mod model;
pub mod metrics;
pub mod norm;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod tape;
pub mod window;

pub use error::{Error, Result};
pub use tensor::{read_wt4, write_wt4, Real, Tensor4};
