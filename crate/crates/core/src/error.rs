use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("grid and parameters are incompatible: {0}")]
    GridMismatch(String),

    #[error("time step {dt:e} violates the {rule} stability bound (admissible dt <= {dt_max:e})")]
    Cfl { dt: f64, dt_max: f64, rule: &'static str },

    #[error("mesh pair ({coarse}, {fine}) is incompatible: fine count must be a multiple of the coarse count")]
    MeshIncompatible { coarse: usize, fine: usize },

    #[error("tumble probability {prob} exceeds 1; reduce dt")]
    ProbabilityOverflow { prob: f64 },

    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("steady-state solve failed: {0}")]
    Solver(String),

    #[error("malformed data file {path}: {message}")]
    Data { path: String, message: String },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by user input rather than by a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ParameterDomain(_)
                | Error::GridMismatch(_)
                | Error::Cfl { .. }
                | Error::MeshIncompatible { .. }
                | Error::ProbabilityOverflow { .. }
                | Error::Config { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
