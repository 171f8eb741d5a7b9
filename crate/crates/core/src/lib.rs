//! Programming exercise recommendation from trial-and-error submission
//! sequences.
//!
//! The model reads a learner's submissions (exercise, code, verdict) one at a
//! time and keeps three latent vectors: programming ability, processing style
//! and understanding style. From these it scores every exercise as the next
//! one to attempt.
//!
//! Modules, bottom-up:
//! - [`tensorkit`]: dense tensors, taped reverse-mode gradients, Adam.
//! - [`dataio`]: submission logs, vocabulary, windows, split, statistics.
//! - [`codefeat`]: initial code embeddings (precomputed or hashed tokens).
//! - [`encoder`], [`perscell`], [`model`]: the network itself.
//! - [`training`], [`evalrank`]: objective, optimisation loop, ranking metrics.
//! - [`simlearner`], [`probe`]: synthetic learners with known styles and the
//!   linear probe that checks whether latents recover them.

pub mod checkpoint;
pub mod codefeat;
pub mod dataio;
pub mod encoder;
pub mod evalrank;
pub mod gradcheck;
pub mod model;
pub mod perscell;
pub mod probe;
pub mod rng;
pub mod simlearner;
pub mod tensorkit;
pub mod training;
