//! Variable-complexity neural image codec: trainable transforms, entropy
//! models, a carry-less range coder, complexity masks over the autoregressive
//! context, and the three-stage training procedure.

pub mod arr;
pub mod coder;
pub mod codec;
pub mod corpus;
pub mod ctx;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod img;
pub mod layers;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tape;
pub mod training;

pub use arr::Arr;
pub use error::{RdcError, Result};
