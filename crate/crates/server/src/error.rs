use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use longmem::pipeline::{Stage, TurnError};
use longmem::Error;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Turn(#[from] TurnError),
    #[error("internal error: {0}")]
    Internal(String),
}

fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::InvalidInput(_) | Error::Protocol(_) | Error::Parse { .. } | Error::Json(_) => StatusCode::BAD_REQUEST,
        Error::NotFound(_) => StatusCode::NOT_FOUND,
        Error::Backend(_) => StatusCode::BAD_GATEWAY,
        Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn kind_of(e: &Error) -> &'static str {
    match e {
        Error::InvalidInput(_) => "invalid_input",
        Error::Protocol(_) => "protocol",
        Error::NotFound(_) => "not_found",
        Error::Parse { .. } | Error::Json(_) => "parse",
        Error::Backend(_) => "backend",
        Error::Io(_) => "io",
    }
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Core(e) => status_of(e),
            ApiError::Turn(t) => status_of(&t.source),
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            ApiError::BadRequest(_) => "invalid_input",
            ApiError::NotFound(_) => "not_found",
            ApiError::Core(e) => kind_of(e),
            ApiError::Turn(t) => kind_of(&t.source),
            ApiError::Internal(_) => "internal",
        }
    }

    fn stage(&self) -> Option<Stage> {
        match self {
            ApiError::Turn(t) => Some(t.stage),
            _ => None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::warn!(error = %self, "request failed");
        }
        let mut body = json!({ "error": { "kind": self.kind(), "message": self.to_string() } });
        if let Some(stage) = self.stage() {
            body["error"]["stage"] = json!(stage);
        }
        (status, Json(body)).into_response()
    }
}
