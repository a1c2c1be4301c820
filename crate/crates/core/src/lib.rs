//! Hyperbolic-space human mesh learning on the Poincaré ball.
//!
//! The crate is `no_std` (with `alloc`) and carries every numeric piece of
//! the pipeline: a small reverse-mode tensor engine, the gyrovector algebra
//! of the unit Poincaré ball, hyperbolic transformer layers, the temporal
//! motion prior extractor, the pose/motion optimization blocks, training
//! losses, evaluation metrics, a synthetic scene generator and the toy
//! training loop. File formats and the command-line driver live in the
//! `hymesh` companion crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod checks;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod hyperlayers;
pub mod losses;
pub mod manifold;
pub mod metrics;
pub mod oracles;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use manifold::{Ball, BallParams, Tangent};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
