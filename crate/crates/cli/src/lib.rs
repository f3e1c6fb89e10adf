//! Command implementations for the batch pipeline binary.

pub mod config;
pub mod pipeline;
pub mod verify;
