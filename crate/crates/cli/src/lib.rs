//! Command-line workflows: simulation, log ingestion, calibration, Monte
//! Carlo studies and before/after hard-iron comparisons.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;

pub use config::{RunConfig, SCHEMA_VERSION};
pub use error::CliError;
pub use ingest::{ingest_csv, parse_csv, IngestError, IngestOptions, LogRecord, SensorLog};
