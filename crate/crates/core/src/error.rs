use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value in {what} at {location}")]
    Numeric { what: String, location: String },

    #[error("simulation blew up at step {step}, particle {particle}")]
    BlowUp { step: usize, particle: usize },

    #[error("matrix at step {step} is singular to tolerance (condition estimate {condition:.3e})")]
    Conditioning { step: usize, condition: f64 },

    #[error("CFL violation: fixed dt {dt:.3e} exceeds stable limit {limit:.3e}")]
    Stability { dt: f64, limit: f64 },

    #[error("mass accounting drifted by {defect:.3e} at step {step}")]
    Conservation { step: usize, defect: f64 },

    #[error("density undershoot {min_value:.3e} at step {step}")]
    Positivity { step: usize, min_value: f64 },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn numeric(what: impl Into<String>, location: impl Into<String>) -> Self {
        Error::Numeric {
            what: what.into(),
            location: location.into(),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
