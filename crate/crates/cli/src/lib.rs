//! File formats, configuration, experiment orchestration and the command-line
//! front end for [`proxykd_core`].
//!
//! * [`dataset`]: binary dataset files.
//! * [`checkpoint`]: checkpoint directories (JSON manifest plus `f32` blobs).
//! * [`config`]: TOML experiment configs with a stable hash.
//! * [`metrics`]: per-run metric CSVs with a metadata sidecar.
//! * [`experiment`]: multi-seed runs producing summary rows.
//! * [`tabulate`]: mean/std tables and SVG plots.
//! * [`cli`]: the `proxykd` command.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod experiment;
pub mod metrics;
pub mod tabulate;

pub use error::{HarnessError, Result};
pub use proxykd_core as core;
