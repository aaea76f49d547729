//! Library behind the `graft` binary: run configuration, the results
//! ledger, command implementations and the ablation suites.

pub mod commands;
pub mod config;
pub mod ledger;
pub mod suites;

pub use config::RunConfig;
