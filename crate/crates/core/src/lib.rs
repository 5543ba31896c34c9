//! Dimensionality-varying diffusion processes.
//!
//! A diffusion chain whose state dimension shrinks at scheduled turning
//! points: between turning points the chain is an attenuated diffusion in a
//! fixed space, and at each turning point the state is downsampled into a
//! smaller subspace (forward) or upsampled with compensating noise (reverse).
//!
//! The crate is organized as a pipeline:
//!
//! - [`cascade`]: the subspace ladder and its linear operators (down/upsampling
//!   and the two-value diagonal operator they induce).
//! - [`schedule`]: attenuation and noise tables plus one-step coefficients.
//! - [`process`]: forward marginals, transitions, posteriors, trajectories.
//! - [`sampler`]: the reverse chain (ancestral and DDIM-style variants).
//! - [`denoiser`]: the noise-prediction contract with a closed-form
//!   Gaussian-mixture realization and a small trainable MLP.
//! - [`verify`]: Jensen-Shannon divergence estimation and the reverse-process
//!   error bounds checked numerically.
//!
//! All state tensors are flat `Vec<f64>` buffers; shapes live in the cascade.

pub mod cascade;
pub mod denoiser;
pub mod process;
pub mod sampler;
pub mod schedule;
pub mod verify;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected length {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("level {level} out of range (cascade has levels 0..={max})")]
    LevelOutOfRange { level: usize, max: usize },
    #[error("timestep {time} outside window ({lo}, {hi}] of level {level}")]
    TimeOutOfWindow {
        time: usize,
        level: usize,
        lo: usize,
        hi: usize,
    },
    #[error("timestep {0} is not the turning point of level {1}")]
    NotTurningPoint(usize, usize),
    #[error("invalid cascade: {0}")]
    InvalidCascade(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("attenuation too small to invert (lambda_bar = {0:.3e})")]
    LambdaUnderflow(f64),
    #[error("operation undefined at t = 0")]
    TimeZero,
    #[error("training diverged at iteration {iteration} (loss = {loss:.3e})")]
    Diverged { iteration: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Deterministic generator for the `index`-th member of a seeded family.
///
/// Batch work (sample i, shard i) draws from independent streams of one base
/// seed, so results do not depend on thread count or execution order.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, got })
    }
}
