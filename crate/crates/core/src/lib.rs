//! Exact masked-language-model oracles for hidden Markov models and
//! memory-augmented HMMs, together with the constructive classification heads
//! and soft prompts that recover latent-posterior downstream labels from those
//! oracles.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] builds, samples and lifts generative models.
//! * [`enumerate`] is the brute-force path-sum oracle used to cross-check
//!   everything else.
//! * [`inference`] evaluates the oracle `G` and its embedding-input extension
//!   by scaled forward/backward message passing, and differentiates it.
//! * [`assumptions`] decides non-degeneracy conditions with rank certificates.
//! * [`recovery`] builds linear heads, prompts and hard-argmax attention heads.
//! * [`downstream`] labels sequences from exact posteriors and builds datasets.
//! * [`tuning`] trains heads and prompts against exact oracle outputs.
//! * [`experiment`] is the seeded, reproducible experiment harness.
//!
//! Matrices are stored column-stochastic throughout: `transition[(next, prev)]`
//! and `emission[(token, state)]`.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assumptions;
pub mod downstream;
pub mod enumerate;
pub mod error;
pub mod experiment;
pub mod families;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod model;
pub mod par;
pub mod recovery;
pub mod rng;
pub mod tuning;

pub use error::{Error, Result};
pub use model::{HmmParams, MemHmmParams, SequenceSample};
