//! Next-token code prediction over serialized syntax trees.
//!
//! The pipeline: parse and normalize py150-style ASTs ([`ast`]), turn them
//! into token sequences and windows ([`seqgen`], [`dataset`]), build a capped
//! vocabulary ([`vocab`]), train a small causal transformer ([`model`],
//! [`train`]) and score it with MRR@10 ([`eval`]) or inspect it with input
//! saliency ([`saliency`]).

pub mod ast;
pub mod dataset;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod saliency;
pub mod seqgen;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
