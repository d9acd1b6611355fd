//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records operations as they execute; every value is computed
//! eagerly and [`Tape::backward`] accumulates gradients for all trainable
//! leaves. Domain-specific operations (skinning, normals, Chamfer, ...) plug
//! in through the [`Function`] trait with hand-written backward passes.

mod adam;
pub mod check;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamHyper, AdamMoments};
pub use tape::{Axis, Function, Tape, Var};
pub use tensor::{Shape, Tensor};

pub(crate) use tape::softmax_in_place;
