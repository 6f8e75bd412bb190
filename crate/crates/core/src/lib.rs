//! Hierarchical graph forecasting for count time series.
//!
//! The pipeline builds a three-layer graph over the series (a Pearson
//! top-K similarity graph at the bottom, k-means clusters in the middle and
//! a single aggregate root), encodes every node's input window with
//! patching plus depthwise/pointwise convolutions, runs horizontal and
//! top-down hierarchical message passing, forecasts with per-cluster GRU
//! heads, and optionally coordinates all forecasts through a learnable map
//! followed by the hierarchy matrix so that every parent equals the sum of
//! its children.
//!
//! Everything trainable runs on the small reverse-mode engine in [`tape`].

#![allow(clippy::needless_range_loop)]

pub mod baselines;
pub mod batch;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod hmgnn;
pub mod io;
pub mod kmeans;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod params;
pub mod series;
pub mod sparse;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod windows;

pub use error::{Error, Result};
pub use par::Execution;
pub use params::ParameterStore;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
