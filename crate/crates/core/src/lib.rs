//! Lossy-context surprisal and reading-time regression.
//!
//! The pipeline ingests an eye-tracking corpus, scores each word with a
//! language model whose context passes through a noise function, fits
//! nested linear mixed-effects models of gaze duration with and without the
//! surprisal predictors, and reports the per-token log-likelihood gain
//! (psychometric predictive power) together with the supporting statistics.

pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod lm;
pub mod noise;
pub mod pipeline;
pub mod regress;
pub mod stats;
pub mod surprisal;
pub mod synth;
pub mod traindata;

pub use error::{Error, Result};
