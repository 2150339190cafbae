//! Experiment orchestration.
//!
//! A JSON configuration (or a named preset) plus a run directory fully
//! determine an experiment. Stages exchange data through persisted,
//! manifest-tracked artifacts:
//!
//! - `sample`: calibrate and run the chains at every tempering level;
//! - `ti`: integrate the tempering curve into a KL estimate;
//! - `mfvi`: train the variational baseline and sample its losses;
//! - `diagnose`: convergence and calibration tables;
//! - `certify`: assemble every risk certificate;
//! - `report`: final tables plus the bound-violation audit;
//!
//! and `verify` checks the manifest against the directory contents.

pub mod artifacts;
pub mod config;
pub mod manifest;
pub mod stages;

pub use config::{ExperimentConfig, Stage};
pub use manifest::{verify, RunManifest, VerifyReport};
pub use stages::{run_configured_stages, run_stage, ResolvedExperiment};
