use std::fmt;

use cdr_core::Error as CoreError;

/// Exit status class: bad input (1) or a failure while doing the work (2).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Validation,
    Runtime,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Validation => 1,
            Kind::Runtime => 2,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn validation(error: impl Into<anyhow::Error>) -> Self {
        CliError {
            kind: Kind::Validation,
            error: error.into(),
        }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        CliError {
            kind: Kind::Runtime,
            error: error.into(),
        }
    }
}

/// Shorthand for a validation error with a plain message.
pub fn invalid(message: impl fmt::Display) -> CliError {
    CliError::validation(anyhow::anyhow!("{message}"))
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

/// Failed writes and numerical blow-ups are runtime errors; anything that
/// points at the inputs or the configuration is a validation error.
fn classify(e: &CoreError) -> Kind {
    match e {
        CoreError::Io { .. } | CoreError::Diverged { .. } | CoreError::Interrupted { .. } => Kind::Runtime,
        _ => Kind::Validation,
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError {
            kind: classify(&e),
            error: e.into(),
        }
    }
}

pub trait Context<T> {
    fn context(self, message: impl fmt::Display + Send + Sync + 'static) -> CliResult<T>;
}

impl<T, E: Into<CliError>> Context<T> for Result<T, E> {
    fn context(self, message: impl fmt::Display + Send + Sync + 'static) -> CliResult<T> {
        self.map_err(|e| {
            let e = e.into();
            CliError {
                kind: e.kind,
                error: e.error.context(message),
            }
        })
    }
}
