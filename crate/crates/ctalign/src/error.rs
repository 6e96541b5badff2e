use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use ctalign_core::Error as CoreError;

/// Failures surfaced by the file formats and the command line.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: line {line}, column {column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(CoreError),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Shape(msg) => CliError::Shape(msg),
            CoreError::Config(msg) => CliError::Config(msg),
            other => CliError::Core(other),
        }
    }
}

/// Process exit status per error class. Usage errors exit with 2 (clap).
pub mod exit {
    pub const PARSE: u8 = 3;
    pub const SHAPE: u8 = 4;
    pub const CONFIG: u8 = 5;
    pub const GRID: u8 = 6;
    pub const NUMERICAL: u8 = 7;
    pub const INVALID_INPUT: u8 = 8;
    pub const IO: u8 = 9;
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse { .. } => exit::PARSE,
            CliError::Io { .. } => exit::IO,
            CliError::Shape(_) => exit::SHAPE,
            CliError::Config(_) => exit::CONFIG,
            CliError::Core(e) => match e {
                CoreError::Grid(_) => exit::GRID,
                CoreError::Numerical { .. } => exit::NUMERICAL,
                CoreError::Shape(_) => exit::SHAPE,
                CoreError::Config(_) => exit::CONFIG,
                CoreError::AllMasked
                | CoreError::DegenerateVector { .. }
                | CoreError::Simplex(_)
                | CoreError::EmptyLabelSet
                | CoreError::Evaluation(_)
                | CoreError::UndefinedMetric(_) => exit::INVALID_INPUT,
            },
        }
    }
}

impl From<&CliError> for ExitCode {
    fn from(e: &CliError) -> Self {
        ExitCode::from(e.exit_code())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
