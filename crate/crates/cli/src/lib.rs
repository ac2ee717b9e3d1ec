//! Command-line front end for ReSOM experiments and distributed nodes.

pub mod commands;
pub mod config;
pub mod mosaic;
