//! Conditional flow matching on 2D distributions, lifted into a learned
//! Koopman embedding where the generative dynamics are linear.
//!
//! Pipeline: train a velocity field ([`cfm`]), learn a decoder-free encoder
//! and generator matrix on its dynamics ([`koopman`]), then sample in one
//! step with a matrix exponential ([`sampler`]) and inspect the result
//! ([`analysis`]).

// `!(x <= max)` is how parameter checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cfm;
pub mod checkpoint;
pub mod datasets;
pub mod koopman;
pub mod linalg;
pub mod ndcore;
pub mod nn;
pub mod sampler;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for a seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` derived from `seed`.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
