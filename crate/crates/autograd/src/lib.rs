//! A small reverse-mode automatic differentiation engine over row-major
//! `f64` matrices.
//!
//! Every value is a 2-D matrix (`rows × cols`); vectors are `1 × n` rows
//! and scalars are `1 × 1`. A [`Tape`] records operations for a single
//! forward pass and [`Tape::backward`] propagates gradients from a scalar
//! back to every parameter and tracked input that contributed to it.
//!
//! Parameters live outside the tape in a [`ParamStore`]; the tape borrows
//! them, so a forward pass never copies weights.

pub mod check;
mod optim;
mod params;
mod tape;

pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use params::{Gradients, Init, ParamId, ParamStore};
pub use tape::{Tape, Var};

/// Dense row-major matrix used for every value on the tape.
pub type Matrix = ndarray::Array2<f64>;
