//! Command-line and HTTP front ends of the biodw warehouse.

pub mod api;
pub mod cli;
pub mod ops;
mod render;
