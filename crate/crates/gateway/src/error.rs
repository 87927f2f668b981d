use recall_core::alignment::AlignError;
use recall_core::archive::ArchiveError;
use recall_core::domain::{DomainError, Modality};
use recall_core::ingestion::IngestError;
use recall_core::retrieval::RetrievalError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("modality {} is disabled for session {session}", .modality.as_str())]
    ModalityDisabled { session: String, modality: Modality },
    #[error("session {0} is already finalized")]
    SessionFinalized(String),
    #[error("unknown stream `{0}`; expected transcript, physio or gaze")]
    UnknownStream(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("no route for {0}")]
    NotFound(String),
    #[error("cannot bind {addr}: {reason}")]
    Bind { addr: String, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("internal: {0}")]
    Internal(String),
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::Domain(e) => e.code(),
            GatewayError::Ingest(_) => "STREAM_UNREADABLE",
            GatewayError::Align(e) => e.code(),
            GatewayError::Archive(e) => e.code(),
            GatewayError::Retrieval(e) => e.code(),
            GatewayError::ModalityDisabled { .. } => "MODALITY_DISABLED",
            GatewayError::SessionFinalized(_) => "SESSION_FINALIZED",
            GatewayError::UnknownStream(_) => "UNKNOWN_STREAM",
            GatewayError::BadRequest(_) => "BAD_REQUEST",
            GatewayError::NotFound(_) => "NOT_FOUND",
            GatewayError::Bind { .. } => "BIND_FAILURE",
            GatewayError::Io(_) => "IO_ERROR",
            GatewayError::Internal(_) => "INTERNAL",
        }
    }

    /// HTTP status for the error code.
    pub fn status(&self) -> u16 {
        match self.code() {
            "UNKNOWN_SESSION" | "NOT_FOUND" | "UNKNOWN_STREAM" => 404,
            "CONSENT_DISABLED" | "MODALITY_DISABLED" => 403,
            "SESSION_EXISTS" | "SESSION_FINALIZED" | "OUT_OF_ORDER_APPEND" => 409,
            "ALL_STREAMS_EMPTY" | "NO_PHYSIO_DATA" => 422,
            "CORRUPT_ARCHIVE" | "IO_ERROR" | "BIND_FAILURE" | "INTERNAL" | "INVALID_GRAMMAR" => 500,
            _ => 400,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody { error: ErrorDetail { code: self.code(), message: self.to_string() } }
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Serialize)]
pub struct ErrorDetail {
    pub code: &'static str,
    pub message: String,
}
