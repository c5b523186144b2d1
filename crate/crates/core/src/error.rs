//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("could not place {placed} of {requested} buildings within {attempts} attempts")]
    TerrainPlacement {
        requested: usize,
        placed: usize,
        attempts: usize,
    },

    #[error("coverage range is infeasible: gain floor {gain_floor:.3e} requires altitude below {max_altitude:.1} m")]
    InfeasibleAltitude { gain_floor: f64, max_altitude: f64 },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("joint action space 4^{n_abs} exceeds cap {cap}")]
    JointActionSpace { n_abs: usize, cap: usize },

    #[error("replay buffer not full: {len} of {capacity} transitions stored")]
    ReplayNotFull { len: usize, capacity: usize },

    #[error("network spec invalid: {0}")]
    InvalidNetwork(String),

    #[error("training diverged: non-finite loss at train step {step}")]
    Divergence { step: u64 },

    #[error("k-means needs at least as many points as clusters (n={n_points}, k={n_clusters})")]
    DegenerateClustering { n_points: usize, n_clusters: usize },

    #[error("malformed {what} file: {detail}")]
    MalformedFile { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
