//! Orchestration layer for the adaptive training pipeline: run configs,
//! report files, the weights format, and the multi-arm comparison harness.
//! The `adaptune` binary is a thin wrapper over these modules.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod weights;
