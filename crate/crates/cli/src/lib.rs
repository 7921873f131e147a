//! Implementation of the `modref` command-line tool.

pub mod args;
pub mod commands;
pub mod report;

use std::fmt;

pub use args::{Cli, Command};

/// Exit code for invalid input or arguments.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit code for file-system failures.
pub const EXIT_IO: i32 = 1;

#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => EXIT_VALIDATION,
            Failure::Io(_) => EXIT_IO,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "invalid input: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<modref_core::Error> for Failure {
    fn from(e: modref_core::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Io(e.to_string())
        }
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Fixtures(a) => commands::fixtures(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a).map(|_| ()),
        Command::ExportBank(a) => commands::export_bank(a),
    }
}
