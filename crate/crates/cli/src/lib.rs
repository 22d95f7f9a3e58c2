//! Library side of the `pgm` tool: configuration, reports and one function
//! per subcommand.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
