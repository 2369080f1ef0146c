//! Batched channel-by-channel encrypted CNN inference over a simulated
//! homomorphic SIMD engine.

pub mod cli;
pub mod conv;
pub mod engine;
pub mod error;
pub mod fc;
pub mod model;
pub mod nonlinear;
pub mod packing;
pub mod pipeline;
pub mod routing;
pub mod tensor;

pub use engine::{CipherVec, Engine, EngineParams, OpCounters, PlainVec};
pub use error::{Constraint, Error, Result};
pub use tensor::Image;
