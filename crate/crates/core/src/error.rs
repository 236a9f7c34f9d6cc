use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("face {face} references vertex {index}, but the mesh has {vertex_count} vertices")]
    IndexOutOfRange {
        face: usize,
        index: usize,
        vertex_count: usize,
    },

    #[error("face {face} is degenerate (repeated vertex index)")]
    DegenerateFace { face: usize },

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("simplification would collapse below {minimum} vertices (target {target})")]
    SimplificationCollapse { target: usize, minimum: usize },

    #[error("degenerate alignment: all vertices coincide")]
    DegenerateAlignment,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("value outside mechanism domain: {0}")]
    Domain(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero variance in normalisation samples")]
    ZeroVariance,

    #[error("unknown causal node `{0}`")]
    UnknownNode(String),

    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: non-finite {term}")]
    Divergence { epoch: usize, term: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
