//! Unsupervised test-time debiasing for iterative generative samplers.
//!
//! The crate is organised as the pipeline runs:
//!
//! - [`surrogate`]: a synthetic attractor-dynamics sampler with hidden mode
//!   labels and a frozen nonlinear decoder into a semantic embedding space.
//! - [`projector`]: a time-conditioned two-layer network mapping latent states
//!   to the semantic space, trained with a normalized-temperature
//!   cross-entropy contrastive loss.
//! - [`discovery`]: silhouette-selected k-means followed by gated recursive
//!   spectral refinement, producing a [`discovery::ClusterTree`] and the
//!   depth-weighted target distribution.
//! - [`guidance`]: the KL objective between the batch cluster distribution
//!   and the target, its exact gradient with respect to each latent, and
//!   guided sampling.
//! - [`metrics`]: fairness discrepancy, deviation ratio, embedding-space
//!   Fréchet distance and the ground-truth oracle classifier.
//! - [`harness`]: staged, persisted, reproducible experiment runs.

pub mod discovery;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod projector;
pub mod surrogate;

pub use error::{Error, Result};
pub use numerics::{DenseMatrix, ProbVector};

/// Stable 64-bit FNV-1a hash, used to derive per-stage seeds.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `seed ^ stable_hash(stage)`.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    seed ^ stable_hash(stage)
}
