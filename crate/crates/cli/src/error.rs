use std::fmt;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// A failed command with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<fewshot_core::Error> for CliError {
    fn from(e: fewshot_core::Error) -> Self {
        use fewshot_core::Error as E;
        let code = if e.is_divergence() {
            EXIT_DIVERGENCE
        } else if matches!(e.root(), E::InvalidArgument(_)) {
            EXIT_USAGE
        } else {
            EXIT_DATA
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}
