//! Minimal dense `f64` tensors with reverse-mode differentiation, the
//! numerical substrate for the codec, backbone and heads.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Adam, PlateauScheduler};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{gelu_scalar, AttnSegment, ConvSpec, Csr, Grads, PoolMode, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
