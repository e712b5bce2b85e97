use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    /// Errors from loading a referenced trajectory: the reference itself is bad.
    pub fn from_load(err: koopcycle::Error) -> Self {
        Self::bad_request(err.to_string())
    }
}

impl From<koopcycle::Error> for ApiError {
    fn from(err: koopcycle::Error) -> Self {
        use koopcycle::Error as E;
        let status = match &err {
            E::InvalidArgument(_)
            | E::Shape { .. }
            | E::UnknownBlock(_)
            | E::EmptyMatrix { .. }
            | E::Json(_)
            | E::MalformedHeader(_)
            | E::TruncatedPayload { .. }
            | E::DimensionMismatch { .. } => StatusCode::BAD_REQUEST,
            E::StaleModel { .. } => StatusCode::CONFLICT,
            E::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            // degenerate regions and numerical failures of the fit or solve
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, err.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}", self.message);
        }
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
