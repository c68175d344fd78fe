//! Pipeline commands and the HTTP render service.

pub mod commands;
pub mod dataset;
pub mod render;
pub mod server;

use std::fmt;

/// Failure of a command, split by the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or inputs; exit code 2.
    Usage(String),
    /// The command was valid but failed while running; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

/// Whether a core error stems from the caller's inputs.
pub fn is_input_error(e: &sunsplat_core::Error) -> bool {
    use sunsplat_core::Error as E;
    match e {
        E::Parse { .. } | E::Dimension { .. } | E::Shape(_) | E::Invalid(_) | E::Stage(_) | E::Codec(_) => true,
        E::Io(io) => io.kind() == std::io::ErrorKind::NotFound,
        E::NonFinite(_) => false,
    }
}

impl From<sunsplat_core::Error> for CliError {
    fn from(e: sunsplat_core::Error) -> Self {
        if is_input_error(&e) {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        sunsplat_core::Error::from(e).into()
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
