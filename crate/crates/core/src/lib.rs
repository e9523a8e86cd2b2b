//! Identifiable VAE (iVAE) core: a deep latent-variable model with a
//! conditionally factorized exponential-family prior, estimated by
//! maximizing an evidence lower bound, together with the synthetic
//! nonlinear-ICA benchmarks and diagnostics used to probe when the true
//! sources are recoverable.
//!
//! The crate is `no_std` + `alloc`: everything here is deterministic
//! computation over `f64` buffers, seeded by explicit counters. File
//! formats, the experiment CLI and parallel sweep execution live in the
//! companion `ivae-lab` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod causal;
pub mod datagen;
pub mod eval;
pub mod linalg;
pub mod math;
pub mod model;
pub mod nets;
pub mod priors;
pub mod rng;
pub mod tensor;

pub use rng::CounterRng;
pub use tensor::{Tape, TensorId};
