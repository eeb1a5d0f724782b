//! Command line and HTTP front ends for harmonkit.

pub mod cli;
pub mod config;
pub mod server;
