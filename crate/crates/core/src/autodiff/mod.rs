//! Reverse-mode differentiation over dense `f64` tensors.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, EntryCheck, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use params::{BoundParams, GradientMap, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
use tape::softmax_rows;
