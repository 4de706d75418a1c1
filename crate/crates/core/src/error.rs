use thiserror::Error;

pub type Result<T> = std::result::Result<T, FedPopError>;

#[derive(Debug, Error)]
pub enum FedPopError {
    /// A caller broke an operation's precondition (shapes, ranges, signs).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A Markov chain produced a non-finite iterate.
    #[error("chain diverged (client {client:?}, round {round:?}, step {step}): iterate {iterate:?}")]
    ChainDivergence {
        client: Option<usize>,
        round: Option<usize>,
        step: u64,
        iterate: Vec<f64>,
    },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl FedPopError {
    pub fn contract(msg: impl Into<String>) -> Self {
        FedPopError::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        FedPopError::Numeric(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        FedPopError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Attach client/round context to a divergence raised deep inside a kernel.
    pub fn with_client_round(self, client_id: usize, round_idx: usize) -> Self {
        match self {
            FedPopError::ChainDivergence { step, iterate, .. } => FedPopError::ChainDivergence {
                client: Some(client_id),
                round: Some(round_idx),
                step,
                iterate,
            },
            other => other,
        }
    }
}

impl From<serde_json::Error> for FedPopError {
    fn from(e: serde_json::Error) -> Self {
        FedPopError::Serde(e.to_string())
    }
}

impl From<csv::Error> for FedPopError {
    fn from(e: csv::Error) -> Self {
        FedPopError::Serde(e.to_string())
    }
}
