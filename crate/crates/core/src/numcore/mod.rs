//! Dense tensors, a define-by-run reverse-mode tape, and Adam.
//!
//! Everything is `f64`. Parameters live outside the graph as [`Tensor`]s; each
//! training step copies them into a fresh [`Graph`], runs forward and
//! backward, and copies gradients back out.

mod adam;
pub mod gradcheck;
mod graph;
mod kernels;
mod tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use adam::{clip_grad_norm, AdamState};
pub use graph::{broadcast_shape, conv1d_output_len, Graph, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: argument out of domain at element {index} (value {value})")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("parameter {index} has no gradient")]
    MissingGrad { index: usize },
}

/// Seeded parameter initializer.
///
/// Draws come from a ChaCha8 stream keyed by the 64-bit seed, so a given
/// seed yields the same weights on every platform. Uniform draws use
/// `rand`'s `gen_range` on `f64`.
#[derive(Debug, Clone)]
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `U(-bound, bound)` entries.
    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if bound > 0.0 { self.rng.random_range(-bound..bound) } else { 0.0 })
            .collect();
        Tensor::new(shape, data).expect("sized from shape")
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for dense and
    /// convolutional layers.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }
}
