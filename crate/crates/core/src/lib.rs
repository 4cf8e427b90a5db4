//! Test-time adaptation of batch-normalization layers for causal
//! time-series forecasting and direction classification.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. All arithmetic is `f64` and all transcendental functions go
//! through `libm`, so results are bit-reproducible across targets.
//!
//! Layout:
//!
//! - [`backbone`]: residual TCN with temporal batch norm, forward pass,
//!   analytic backward pass and supervised training.
//! - [`adapt`]: unsupervised test-time losses, uncertainty proxy, threshold
//!   calibration, EMA teacher and the per-day adaptation loop.
//! - [`augment`]: causality-preserving weak window transforms.
//! - [`shiftgen`]: synthetic gradual-drift, noise-inflation and
//!   structural-switch generators.
//! - [`data`]: series frames, OHLCV features, chronological splits,
//!   scalers and sliding windows.
//! - [`evalstat`]: forecast metrics, Diebold–Mariano and Newey–West
//!   inference, calibration and the directional backtest.
#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]
// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod adapt;
pub mod augment;
pub mod backbone;
pub mod data;
mod error;
pub mod evalstat;
pub mod rng;
pub mod shiftgen;

pub use error::{Error, Result};
