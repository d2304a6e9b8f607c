//! Session-based music recommendation.
//!
//! A session is an ordered list of tracks. Training pairs each session with
//! an augmented view (transition-based insertion for shuffle sessions,
//! windowed reordering for non-shuffle sessions), encodes both with a gated
//! graph network and optimizes a next-track cross-entropy together with
//! item-level matching and session-level alignment losses.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod trainer;
pub mod transitions;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = matrix::Matrix<f64>;
pub type Params = encoder::ModelParams<f64>;
pub type Transitions = transitions::NormalizedTransitions<f64>;
