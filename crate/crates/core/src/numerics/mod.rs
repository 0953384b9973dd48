//! Dense `f64` linear algebra, hand-written backward kernels, parameter
//! storage and finite-difference gradient checking.

mod gradcheck;
mod matrix;
pub(crate) mod ops;
mod params;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ABSOLUTE_FLOOR};
pub use matrix::Matrix;
pub use ops::{
    cosine_rows, cosine_rows_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, layer_norm_cached,
    matmul, softmax_rows, softmax_rows_backward, CosineSimilarity, LayerNormCache,
};
pub use params::{Gradients, ParamId, ParamStore, Parameter};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The deterministic generator used everywhere a seed is accepted.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a label.
pub fn derived_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
