//! Tensors and the reverse-mode tape.

mod tape;
mod tensor;

pub use tape::{Tape, VarId};
pub use tensor::{sample_index, sample_standard_normal, Element, Tensor};
