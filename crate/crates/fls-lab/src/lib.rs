//! Experiment harness: wires the estimation and pruning machinery into the
//! synthetic studies, manages seeds and configs, persists results as
//! `manifest.json` + `metrics.csv` (+ `timings.csv`) and emits SVG plots.
//!
//! Every run is a pure function of its manifest: rerunning with the same
//! config and seeds reproduces `metrics.csv` byte for byte. Wall-clock
//! measurements live in `timings.csv`, outside the determinism contract.

pub mod config;
pub mod experiments;
pub mod plot;
pub mod record;
pub mod stats;

pub use experiments::{run_experiment, ExperimentId, RunContext};
