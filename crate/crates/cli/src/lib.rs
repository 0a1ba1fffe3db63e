//! Library side of the `convcnp` command-line tool: configuration files,
//! output formats, symmetry audits and the subcommands themselves.

pub mod audit;
pub mod commands;
pub mod config;
pub mod output;
