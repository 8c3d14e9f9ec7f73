//! Dense tensors with a reverse-mode tape, optimizers and a finite-difference
//! gradient oracle.

mod dense;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod optim;
mod params;
mod real;

pub use dense::Tensor;
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Mask, Var};
pub use optim::{Adam, AdamConfig, Sgd};
pub use params::{ParamGrads, ParamId, ParamStore, Parameter, StorageId};
pub use real::{DType, Real};

use rand::Rng;

/// Uniform Xavier/Glorot initialisation for a `fan_in×fan_out` matrix.
pub fn xavier<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    uniform(&[rows, cols], a, rng)
}

/// Elements drawn uniformly from `[-a, a]`.
pub fn uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], a: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-a..=a))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}
