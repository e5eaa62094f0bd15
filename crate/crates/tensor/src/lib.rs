//! Dense-tensor tape with reverse-mode automatic differentiation, the
//! optimizer machinery to train on top of it, and bit-exact checkpointing.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;

pub use error::TensorError;
pub use params::{Init, Param, ParamId, ParamStore};
pub use rng::Rng;
pub use scalar::{Dtype, Scalar};
pub use tape::{Grads, Shape, Tape, Tx};
