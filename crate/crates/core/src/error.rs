use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("collocation grid {grid} is below the dealiasing minimum {required} for cutoff {cutoff}")]
    GridTooSmall {
        grid: usize,
        required: usize,
        cutoff: usize,
    },

    #[error("time step {dt} does not align with control grid point {point}")]
    GridMisaligned { dt: f64, point: f64 },

    #[error("solver blow-up at t = {time}: {reason}")]
    BlowUp { time: f64, reason: String },

    #[error("noise realization does not match the trajectory it is paired with")]
    NoiseMismatch,

    #[error("control outside the admissible set: {0}")]
    InadmissibleControl(String),

    #[error("optimizer did not converge after {iterations} iterations (objective {objective})")]
    NotConverged { iterations: usize, objective: f64 },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
