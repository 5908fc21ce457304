//! Seeded random streams.
//!
//! All randomness in a run flows from one root seed through named substreams,
//! so e.g. changing the number of training episodes never perturbs parameter
//! initialization and the relation split never depends on sampling order.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::Matrix;

/// Purpose-named substreams of the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split = 1,
    Synth = 2,
    Init = 3,
    Sample = 4,
    Eval = 5,
}

/// An independent ChaCha stream for `(root, stream)`.
pub fn substream(root: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream as u64);
    rng
}

/// Row-major N(0, std²) matrix.
pub fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    let normal = Normal::new(0.0, std).expect("valid normal");
    Matrix::from_shape_fn((rows, cols), |_| normal.sample(rng))
}
