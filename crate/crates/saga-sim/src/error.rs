use thiserror::Error;

use crate::model::WorkerId;

#[derive(Debug, Error)]
pub enum SimError {
    /// Configuration or input validation failure, with the offending field path.
    #[error("invalid {path}: {message}")]
    Validation { path: String, message: String },

    /// Demand cannot fit even after evicting every resident entry.
    #[error("capacity exceeded on worker {worker_id:?}: need {needed} bytes, capacity {capacity}")]
    Capacity {
        worker_id: Option<WorkerId>,
        needed: u64,
        capacity: u64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl SimError {
    pub fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        SimError::Validation {
            path: path.into(),
            message: message.into(),
        }
    }
}
