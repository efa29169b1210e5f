//! Dense-matrix numeric core with reverse-mode automatic differentiation.

pub mod matrix;
pub mod tape;

pub use matrix::{Matrix, LAYER_NORM_EPS};
pub use tape::{Tape, ValueId, PROB_CLAMP};
