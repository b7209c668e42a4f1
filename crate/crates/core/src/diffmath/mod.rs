//! Shaped `f64` tensors, a reverse-mode tape, gradient checking and the
//! checkpoint file format.

mod checkpoint;
mod gradcheck;
mod tape;
mod tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, FORMAT_TAG, FORMAT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{lse, sigmoid, softplus};

/// The crate-wide deterministic generator.
pub type Prng = ChaCha8Rng;

pub fn prng(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(rng: &mut Prng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("xavier shape")
}
