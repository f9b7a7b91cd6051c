use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StudioError {
    #[error("config: {0}")]
    Config(String),

    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("not ready: {0}")]
    NotReady(String),

    #[error("service unavailable: {0}")]
    Unavailable(String),

    #[error("checkpoint rejected: {0}")]
    CheckpointRejected(String),

    #[error("storage: {0}")]
    Storage(String),

    #[error(transparent)]
    Core(#[from] lots_core::Error),
}

impl StudioError {
    pub fn validation(field: impl Into<String>, message: impl ToString) -> Self {
        StudioError::Validation {
            field: field.into(),
            message: message.to_string(),
        }
    }

    pub fn storage(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        StudioError::Storage(format!("{context}: {e}"))
    }

    pub fn status(&self) -> StatusCode {
        match self {
            StudioError::Validation { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            StudioError::NotFound(_) => StatusCode::NOT_FOUND,
            StudioError::NotReady(_) => StatusCode::CONFLICT,
            StudioError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            StudioError::CheckpointRejected(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StudioError::Config(_) | StudioError::Storage(_) | StudioError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            StudioError::Config(_) => "config",
            StudioError::Validation { .. } => "validation",
            StudioError::NotFound(_) => "not_found",
            StudioError::NotReady(_) => "not_ready",
            StudioError::Unavailable(_) => "unavailable",
            StudioError::CheckpointRejected(_) => "checkpoint_rejected",
            StudioError::Storage(_) => "storage",
            StudioError::Core(_) => "internal",
        }
    }
}

/// JSON error body: `{"error": {"code", "message", "field"?}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl IntoResponse for StudioError {
    fn into_response(self) -> Response {
        let field = match &self {
            StudioError::Validation { field, .. } => Some(field.clone()),
            _ => None,
        };
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code().into(),
                message: self.to_string(),
                field,
            },
        };
        (self.status(), Json(body)).into_response()
    }
}
