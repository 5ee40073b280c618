//! Batch front end for the `invrl` pipeline.
//!
//! Every command reads a [`RunConfig`], writes its outputs under
//! `config.out` together with a `manifest.json`, and reports a [`Status`].
//! Fatal problems come back as errors.

mod commands;
mod config;
mod output;

pub use commands::{cmd_fit, cmd_risk, cmd_scramble, cmd_simulate, Status};
pub use config::{RewardScheme, RunConfig, SimulateConfig};
pub use output::MANIFEST;
