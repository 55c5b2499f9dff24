//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records operations eagerly; [`Graph::backward`] walks the tape
//! in reverse. Trainable tensors live in [`LayerParams`] and are copied onto
//! the tape with [`Graph::param`]; [`Graph::accumulate`] adds their gradients
//! back, and [`opt_step`] applies Adam with a cosine-annealed learning rate.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use graph::{Gradients, Graph, SiteConsts, Var};
pub use optim::{cosine_lr, opt_step, OptimState, ANNEAL_POINT};
pub use tensor::{LayerParams, ParamId, Tensor};

use rand::Rng;

use crate::scalar::Real;

/// Default group count for group normalization.
pub const GN_GROUPS: usize = 32;
pub const GN_EPS: f64 = 1e-5;

/// Kaiming-uniform initialization for a layer with `fan_in` inputs feeding a ReLU.
pub fn kaiming_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}
