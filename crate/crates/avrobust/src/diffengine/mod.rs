//! Dense `f64` tensors, a reverse-mode tape and an Adam optimizer.
//!
//! Every model forward pass and every input-gradient attack in the crate
//! runs on this engine. A [`Graph`] is built per forward pass, consumed by
//! one [`Graph::backward`] call and dropped.

mod adam;
pub mod gradcheck;
mod graph;
mod linalg;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{sigmoid, Gradients, Graph, PoolMode, Pointwise, Var, PROB_CLAMP};
pub use tensor::Tensor;

use rand::Rng;

/// Uniform initialization in `±√(6/(fan_in+fan_out))`.
pub fn glorot_uniform<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
