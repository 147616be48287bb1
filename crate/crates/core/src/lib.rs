//! Multiple-choice reading comprehension by summary infilling.
//!
//! Every candidate answer is written into the question's placeholder to form a
//! complete sentence (the *summary*). The passage and each summary are encoded
//! jointly, pooled per segment, scored by a small tanh head and normalized with
//! a softmax over the five options.
//!
//! The crate is organised bottom-up:
//!
//! - [`dataset`]: line-delimited record ingestion and split statistics
//! - [`composer`]: placeholder infilling, input modes, framing and truncation
//! - [`encoder`]: hidden-state encoders behind the [`encoder::Encoder`] trait
//! - [`head`]: option scoring, softmax and negative log-likelihood
//! - [`model`]: the encoder + head bundle with forward/backward passes
//! - [`trainer`]: Adam fine-tuning with best-dev checkpoint selection
//! - [`evaluator`]: accuracy, input-mode ablation and cross-dataset studies
//! - [`analyzer`]: per-example prediction records and case-analysis output

pub mod analyzer;
pub mod composer;
pub mod dataset;
pub mod encoder;
mod error;
pub mod evaluator;
pub mod head;
pub mod model;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};

/// Number of answer options per example.
pub const NUM_OPTIONS: usize = 5;
