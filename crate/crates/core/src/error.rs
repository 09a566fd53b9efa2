use thiserror::Error;

pub type Result<T> = std::result::Result<T, GridError>;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} at line {line}, column {column}: {msg}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unsupported load at bus {bus}, phase {phase}: {msg}")]
    UnsupportedLoad {
        bus: String,
        phase: char,
        msg: String,
    },
    #[error("assembly error: {0}")]
    Assembly(String),
    #[error("model regime error: {0}")]
    ModelRegime(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("bracket error: both ends of [{lo}, {hi}] classify as {verdict}")]
    Bracket { lo: f64, hi: f64, verdict: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("soundness violation: {0}")]
    Soundness(String),
}

impl GridError {
    /// Exit code of the command line tool: 1 for bad input, 2 for numerical trouble.
    pub fn exit_code(&self) -> i32 {
        match self {
            GridError::Io { .. }
            | GridError::Parse { .. }
            | GridError::Validation(_)
            | GridError::UnsupportedLoad { .. }
            | GridError::Domain(_)
            | GridError::Config(_) => 1,
            GridError::Assembly(_)
            | GridError::ModelRegime(_)
            | GridError::Numerical(_)
            | GridError::Bracket { .. }
            | GridError::Soundness(_) => 2,
        }
    }
}
