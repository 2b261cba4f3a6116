//! Command-line driver for the routed captioner.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
