//! U-Net segmentation with test-time training (TTT) sequence layers.
//!
//! The crate is self-contained: a small row-major `f64` [`tensor`] type, a
//! tape-based [`autodiff`] engine, the [`nn`] kernels, the [`ttt`] layers
//! whose hidden state is a model trained by one gradient step per token,
//! the [`unet`] architecture, [`training`], evaluation [`metrics`] and the
//! synthetic data pipeline in [`dataio`].

pub mod autodiff;
pub mod config;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod ttt;
pub mod unet;
pub mod verify;

pub use error::{Error, Result};
