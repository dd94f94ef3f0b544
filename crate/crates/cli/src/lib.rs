//! Command-line front end: CSV ingestion, analysis reports, simulation runs
//! and enumeration self-checks.

pub mod commands;
pub mod config;
pub mod io;
pub mod report;
