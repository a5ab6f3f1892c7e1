//! Std companion to `merge-preview-core`: the artifact store and its binary
//! posterior format, CSV/JSON/IDX file handling, TOML experiment configs,
//! parallel sweeps with a cached joint oracle, and the CLI behind the
//! `merge-preview` binary.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod store;
pub mod sweep;

pub use config::{ExperimentConfig, SuiteKind};
pub use error::{Error, Result};
pub use experiment::{build_suite, run_protocol, ProtocolReport, Suite};
pub use store::{load_posterior, save_posterior, ArtifactKey, ArtifactStore};
