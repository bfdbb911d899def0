use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("{path}:{line}: {msg}")]
    Csv { path: String, line: u64, msg: String },

    #[error("unknown node id `{0}`")]
    UnknownNode(String),

    #[error("unknown edge `{0}` -> `{1}`")]
    UnknownEdge(String, String),

    #[error("node `{node}` is missing timestep {timestep}")]
    MissingTimestep { node: String, timestep: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("sub-model {0} is frozen")]
    Frozen(u64),

    #[error("sub-model {0} is not frozen")]
    NotFrozen(u64),

    #[error("meta-graph budget of {budget} edges cannot keep every vertex connected ({deficit} edges over)")]
    BudgetTooSmall { budget: usize, deficit: usize },

    #[error("subgraph {0} has no trainable nodes; merge it first")]
    EmptySubgraph(u64),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
