//! Dense matrices and tape-based reverse-mode differentiation.

pub mod gradcheck;
mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{Tape, Var, NORM_EPSILON};

#[cfg(test)]
mod tests;
