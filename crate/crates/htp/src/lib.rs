//! File formats, pipeline stages and the `htp` command line.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod plot;
