use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid converter parameters: {0}")]
    InvalidParams(String),

    #[error(
        "inductor sizing violated: L = {l:e} H > n*V1*V2/(8*fs*Pmax) = {limit:e} H \
         (evaluated at rated V2 = {v2_rated} V, Pmax = {p_max} W)"
    )]
    InductorSizing {
        l: f64,
        limit: f64,
        v2_rated: f64,
        p_max: f64,
    },

    #[error("modulation variable out of range: {0}")]
    InvalidModulation(String),

    #[error("power command {target} W exceeds capability {capability} W at d1={d1}, d2={d2}")]
    Infeasible {
        target: f64,
        capability: f64,
        d1: f64,
        d2: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    DivergenceDetected { epoch: usize },

    #[error("no feasible modulation found at P = {p} W, V2 = {v2} V")]
    NoFeasiblePoint { p: f64, v2: f64 },

    #[error("rank-deficient fuzzy consequent fit (pivot {pivot:e} at column {column})")]
    SingularFit { column: usize, pivot: f64 },

    #[error("closed-loop simulation diverged at t = {t} s (v2 = {v2} V)")]
    Diverged { t: f64, v2: f64 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
