//! Experiment driver for sdlab: manifests, runs, reports and oracle checks.

pub mod error;
pub mod layout;
pub mod manifest;
pub mod oracle;
pub mod report;
pub mod run;
pub mod svg;

pub use error::{CliError, EXIT_RUNTIME, EXIT_VALIDATION};
pub use manifest::Manifest;
pub use report::{build as build_report, Report};
pub use run::{run, RunOptions};
