//! Pipeline behind the `kkl` command: run configuration, binary
//! checkpoint and dataset containers, and the subcommands from data
//! generation to the merged SMAPE table.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod container;
pub mod failure;

pub use artifacts::{Checkpoint, Layout};
pub use config::{Overrides, RunConfig};
pub use failure::exit_code;
