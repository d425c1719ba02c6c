//! Scenario files, output formats and the commands behind the `swarmplan` binary.

pub mod commands;
pub mod file;
pub mod output;

pub use commands::{cmd_bench, cmd_randsuite, cmd_run, cmd_validate, exit_code, Overrides};
pub use file::{ScenarioFile, SchemaError};
