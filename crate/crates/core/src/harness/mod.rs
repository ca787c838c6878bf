//! Experiment plumbing: configs, replicated runs, traces, fits and the
//! trade-off sweep.

pub mod config;
pub mod experiment;
pub mod fit;
pub mod tradeoff;
pub mod trajectory;
