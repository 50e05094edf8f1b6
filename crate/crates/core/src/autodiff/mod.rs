//! Reverse-mode automatic differentiation for one training segment.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{grad_check, grad_check_with_floor, GradCheckReport};
pub use params::{Gradients, ParamStore};
pub use tape::{ConcatAxis, Primitive, PrimitiveKind, Tape, TapeError, Var};
