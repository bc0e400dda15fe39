//! Dense tensors, a small reverse-mode tape, deterministic RNG, and the
//! optimizers used by the rest of the crate.

pub mod ops;
mod param;
mod rng;
mod tape;
mod tensor;

pub use param::{Adam, Param, ParamId, ParamStore};
pub use rng::{gaussian, Rng};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
