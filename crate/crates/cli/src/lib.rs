//! Command-line harness: config parsing, subcommands and CSV/JSON output.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::*;
pub use config::{DesignGrid, ExplicitSetting, PilotConfig, PriorConfig, RunConfig};
pub use error::{CliError, CliResult, ConfigError};
