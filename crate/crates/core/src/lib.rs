//! Inference and on-device-style transfer learning for 1D residual CNNs
//! over multi-channel time series.
//!
//! The crate is split along the lifecycle of a deployed recognizer:
//!
//! * [`tensor`] — fixed-shape tensor container and the numeric kernels
//!   (conv1d, batch norm, ReLU, dropout, dense, softmax) in two numeric
//!   modes (32-bit and truncated 16-bit storage).
//! * [`model`] — the 10-conv + 1-dense residual network: construction,
//!   forward execution, and the backbone/classifier partition.
//! * [`odtl`] — streaming last-layer training: per-sample gradient,
//!   EMA-of-gradient momentum, and parameter application, with an
//!   optional tiled update path.
//! * [`train`] — full-network offline training (backprop, Adam, early
//!   stopping, class weighting) used to produce pretrained models.
//! * [`data`] — windowed datasets, split strategies (leave-one-session-out,
//!   leave-one-person-out and its 40/60 post-deployment variant), and a
//!   synthetic generator with controllable per-user drift.
//! * [`harness`] — experiment orchestration and metrics: per-round and
//!   mean accuracies, drift loss, recovery, and operation counters.
//!
//! Everything is deterministic given explicit seeds; no global state, no
//! ambient randomness. The crate is `no_std` (with `alloc`); IO, file
//! formats and the CLI live in the companion `odtl-cli` crate.

#![cfg_attr(not(test), no_std)]
// Kernels iterate by explicit index on purpose: accumulation order is
// part of their bit-reproducibility contract.
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod odtl;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::Error;
pub use tensor::{NumericMode, Tensor};

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
