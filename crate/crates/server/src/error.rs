use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use capy_core::clarifier::ClarifyError;
use capy_core::gateway::GatewayError;
use capy_core::insight::InsightError;
use capy_core::story::StoryError;

#[derive(Debug, Clone, Serialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, body: ErrorBody { code: code.to_string(), message: message.into() } }
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", what)
    }

    pub fn conflict(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_error", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", message)
    }

    pub fn run_active() -> Self {
        Self::conflict("run_active", "an analysis run is in progress; stop it or wait for it to finish")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(msg) => ApiError::validation(msg),
            GatewayError::Unparseable { .. } => ApiError::new(StatusCode::BAD_GATEWAY, "unparseable_response", e.to_string()),
            other => ApiError::new(StatusCode::BAD_GATEWAY, "gateway_error", other.to_string()),
        }
    }
}

impl From<ClarifyError> for ApiError {
    fn from(e: ClarifyError) -> Self {
        match e {
            ClarifyError::UnknownCell(_) => ApiError::not_found(e.to_string()),
            ClarifyError::ThreadClosed(_) => ApiError::conflict("thread_closed", e.to_string()),
            ClarifyError::EmptyQuestion => ApiError::validation(e.to_string()),
            ClarifyError::Gateway(g) => g.into(),
        }
    }
}

impl From<InsightError> for ApiError {
    fn from(e: InsightError) -> Self {
        match e {
            InsightError::EmptyNotebook | InsightError::UnknownElement(_) => ApiError::validation(e.to_string()),
            InsightError::Extraction(_) => ApiError::new(StatusCode::BAD_GATEWAY, "extraction_failed", e.to_string()),
            InsightError::Gateway(g) => g.into(),
        }
    }
}

impl From<StoryError> for ApiError {
    fn from(e: StoryError) -> Self {
        match e {
            StoryError::Parse(_) => ApiError::new(StatusCode::BAD_GATEWAY, "story_parse_failed", e.to_string()),
            StoryError::Gateway(g) => g.into(),
            StoryError::EmptyNotebook
            | StoryError::InvalidAnchor(_)
            | StoryError::InvalidFeedback(_)
            | StoryError::UnknownBlock(_)
            | StoryError::MissingFigure { .. }
            | StoryError::Config(_) => ApiError::validation(e.to_string()),
        }
    }
}
