//! `seqseg` command-line tool: dataset generation, training, evaluation,
//! prediction and analysis.

pub mod args;
pub mod commands;
pub mod config;

use std::fmt;

use serde::Serialize;

pub use args::{Cli, Command};

/// Failure of a command: a machine-readable kind, a message and the process
/// exit code (2 for configuration problems, 1 otherwise).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    #[serde(skip)]
    pub code: i32,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            kind: "config",
            message: message.into(),
            code: 2,
        }
    }

    /// The single-line JSON written to stderr.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<seqseg::Error> for CliError {
    fn from(e: seqseg::Error) -> Self {
        use seqseg::Error::*;
        let (kind, code) = match &e {
            Config(_) => ("config", 2),
            Io { .. } => ("io", 1),
            Checkpoint(_) => ("checkpoint", 1),
            Shape(_) => ("shape", 1),
            EmptyMask | EmptyInput(_) => ("empty_input", 1),
            Generation { .. } => ("generation", 1),
            NonFinite { .. } => ("non_finite", 1),
        };
        CliError {
            kind,
            message: e.to_string(),
            code,
        }
    }
}

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Analyze(a) => commands::analyze(a),
    }
}
