//! Command-line front end: runs an analysis from a JSON config and writes
//! static reports (`report.json`, `contour.csv`/`.svg`, `benchmark.csv`,
//! `coverage.csv`).

use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod json;
pub mod report;
pub mod svg;

pub use commands::{analyze, benchmark, contour, simulate, Command, Options};
pub use config::AnalysisConfig;
pub use report::Report;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] ovbound::Error),
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Core(e) => e.kind(),
            CliError::Output { .. } => "output",
            CliError::Unsupported(_) => "unsupported",
        }
    }

    /// 2 for bad input or configuration, 1 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Unsupported(_) => 2,
            CliError::Core(_) | CliError::Output { .. } => 1,
        }
    }

    /// The structured error printed on failure.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            error: Inner<'a>,
        }
        #[derive(Serialize)]
        struct Inner<'a> {
            kind: &'a str,
            message: String,
            exit_code: i32,
        }
        json::to_string(&Body {
            error: Inner { kind: self.kind(), message: self.to_string(), exit_code: self.exit_code() },
        })
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
