//! Joint learning of stock-relation graphs and ranking models.
//!
//! The crate is organised around a small reverse-mode autodiff tensor engine
//! ([`tensor`]) on which the adaptive graph layers are built: [`spl`] encodes
//! per-day price windows into a temporal adjacency, [`tpl`] folds those
//! adjacencies through a gated memory, and [`realize`] turns the learned
//! attributes into discrete graphs consumed by the GNN [`backbone`]s.
//! [`data`], [`graphs`], [`train`] and [`backtest`] supply the surrounding
//! pipeline: price panels, prior-graph constructors, the training loop and
//! portfolio metrics.
//!
//! Core math is generic over the [`scalar::Scalar`] type; `f64` is the
//! working precision used by the training pipeline and the type aliases
//! exported at the crate root.

pub mod ablate;
pub mod backbone;
pub mod backtest;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graphs;
pub mod loss;
pub mod model;
pub mod params;
pub mod realize;
pub mod scalar;
pub mod spl;
pub mod tensor;
pub mod tpl;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense tensor at the crate's working precision.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision tensor for callers that trade accuracy for speed.
pub type Tensor32 = tensor::Tensor<f32>;
/// Tape recording `f64` computations.
pub type Tape64 = tensor::Tape<f64>;
/// Tape recording `f32` computations.
pub type Tape32 = tensor::Tape<f32>;
/// Named parameter set at working precision.
pub type ParamStore64 = params::ParamStore<f64>;
