//! Command line and HTTP job service for the stylecore engine.

pub mod cli;
pub mod config;
pub mod emd_check;
pub mod jobs;
pub mod run;
pub mod service;
