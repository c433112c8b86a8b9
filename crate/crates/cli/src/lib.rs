//! Pipeline commands behind the `cue` binary.
//!
//! Every command reads a [`RunConfig`], checks its upstream artifacts and writes
//! its outputs under a run directory named by the config hash.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod harness;

pub use commands::{cmd_cues, cmd_eval, cmd_neighbors, cmd_split, cmd_train, cmd_zeroshot, Context};
pub use config::{Layout, Overrides, ProviderKind, RunConfig};
pub use error::{CliError, CliResult};
pub use harness::{cmd_ablate, cmd_sweep, cmd_synth};
