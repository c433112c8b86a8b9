//! Long-tailed classification over frozen embeddings with concept-aware
//! multi-label expansion.
//!
//! A single-label logit-adjusted loss is trained jointly with two binary
//! logit-adjusted multi-label terms whose targets come from zero-shot cue mining
//! ([`cues`]) and an LLM-built class neighbor graph ([`neighbors`]).

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cues;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod neighbors;
pub mod synthetic;
pub mod tensorio;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
