//! Experiment orchestration: config, end-to-end runner, report emission.

pub mod config;
pub mod report;
pub mod runner;
