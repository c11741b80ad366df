use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use eyas_core::Error as CoreError;
use serde::{Deserialize, Serialize};

/// An error as it travels between services and out to clients:
/// `{"error": {"code": ..., "message": ...}}` with an HTTP status.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct ServiceError {
    pub status: u16,
    pub code: String,
    pub message: String,
}

pub type ServiceResult<T> = Result<T, ServiceError>;

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

impl ServiceError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.to_string(),
            message: message.into(),
        }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn pending(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "pending", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "config", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn unavailable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", message)
    }

    pub fn status_code(&self) -> StatusCode {
        StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            error: ErrorDetail {
                code: self.code.clone(),
                message: self.message.clone(),
            },
        }
    }
}

impl From<CoreError> for ServiceError {
    fn from(e: CoreError) -> Self {
        use CoreError::*;
        let (status, code) = match &e {
            InvalidImage(_) | Decode(_) | UnsupportedFormat(_) | TooSmall(_) => {
                (StatusCode::BAD_REQUEST, "invalid_image")
            }
            InvalidBackend(_) => (StatusCode::BAD_REQUEST, "invalid_backend"),
            UnknownBackend(_) => (StatusCode::NOT_FOUND, "unknown_backend"),
            BackendConflict(_) => (StatusCode::CONFLICT, "backend_conflict"),
            BackendFailure(_) => (StatusCode::BAD_GATEWAY, "backend_failure"),
            ReportState(_) => (StatusCode::CONFLICT, "invalid_state"),
            EmptyReport => (StatusCode::UNPROCESSABLE_ENTITY, "empty_report"),
            Config(_) => (StatusCode::INTERNAL_SERVER_ERROR, "config"),
            Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
            _ => (StatusCode::UNPROCESSABLE_ENTITY, "analysis_failed"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status_code(), Json(self.body())).into_response()
    }
}
