//! Experiment configuration, replicate runner and derived outputs.

pub mod config;
pub mod experiment;
pub mod oracle;
pub mod plot;
