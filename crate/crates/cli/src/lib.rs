//! Command-line entry points and the HTTP session service.

pub mod cli;
pub mod service;
