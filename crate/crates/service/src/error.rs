//! Error body and status mapping shared by all handlers.

use std::io;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use nbeval_core::algorithms::ModelError;
use nbeval_core::interactions::IngestError;
use nbeval_core::protocol::ProtocolError;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub details: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.into(),
            message: message.into(),
            details: None,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }

    pub fn not_found(code: &str, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn validation(code: &str, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    pub fn malformed(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "MalformedRequest", message)
    }

    pub fn unauthorized() -> Self {
        ApiError::new(
            StatusCode::UNAUTHORIZED,
            "Unauthorized",
            "missing or invalid bearer token",
        )
    }

    pub fn unknown_dataset(id: &str) -> Self {
        ApiError::not_found("UnknownDataset", format!("unknown dataset {id}"))
    }

    pub fn unknown_config(id: &str) -> Self {
        ApiError::not_found("UnknownConfig", format!("unknown config {id}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code, "message": self.message });
        if let Some(details) = self.details {
            body["details"] = details;
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<ProtocolError> for ApiError {
    fn from(e: ProtocolError) -> Self {
        let status = match &e {
            ProtocolError::OutOfOrder { .. }
            | ProtocolError::StaleWindow { .. }
            | ProtocolError::RunFailed(_)
            | ProtocolError::NoEvaluableWindows => StatusCode::CONFLICT,
            ProtocolError::UnknownRun(_) | ProtocolError::UnknownRequestId { .. } => StatusCode::NOT_FOUND,
            ProtocolError::DuplicateInRanking { .. }
            | ProtocolError::RankingTooLong { .. }
            | ProtocolError::ConfigMissing
            | ProtocolError::InvalidConfig(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ProtocolError::CorruptLog(_) | ProtocolError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut err = ApiError::new(status, e.code(), e.to_string());
        match e {
            ProtocolError::OutOfOrder { phase, .. } => {
                err = err.with_details(serde_json::to_value(phase).unwrap_or(Value::Null));
            }
            ProtocolError::StaleWindow { expected, got } => {
                err = err.with_details(json!({ "expected_window": expected, "got_window": got }));
            }
            _ => {}
        }
        err
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        let details = match &e {
            IngestError::EmptyDataset { rejections, .. } | IngestError::TooManyRejections { rejections, .. } => {
                Some(json!({ "rejections": rejections }))
            }
            _ => None,
        };
        let mut err = ApiError::validation(e.code(), e.to_string());
        err.details = details;
        err
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::UnknownModel(_) => "UnknownModel",
            ModelError::InvalidParam { .. } => "InvalidParam",
        };
        ApiError::validation(code, e.to_string())
    }
}

impl From<io::Error> for ApiError {
    fn from(e: io::Error) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Storage", e.to_string())
    }
}
