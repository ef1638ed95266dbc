//! Minimal reverse-mode differentiation: tensors, a tape of primitives,
//! Adam, and a finite-difference checker.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck};
pub use graph::{sigmoid, softplus, Axis, Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

use rand::Rng;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))` for a `rows × cols` weight.
pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}
