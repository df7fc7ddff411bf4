use needle_core::adapter::{AdapterError, ErrorBody};
use needle_core::generation::GenerationError;
use needle_core::pipeline::PipelineError;
use needle_core::trust::TrustError;
use needle_core::vecstore::StoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{what} not found: {id}")]
    NotFound { what: &'static str, id: String },
    /// Request valid but not allowed in the current state.
    #[error("{message}")]
    Conflict { code: &'static str, message: String },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Trust(#[from] TrustError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn not_found(what: &'static str, id: impl ToString) -> Self {
        Self::NotFound { what, id: id.to_string() }
    }

    pub fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        Self::Conflict {
            code,
            message: message.into(),
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            Self::BadRequest(_) => 400,
            Self::NotFound { .. } => 404,
            Self::Conflict { .. } => 409,
            Self::Adapter(_) => 502,
            Self::Trust(TrustError::NotReturned(_)) => 400,
            Self::Pipeline(p) => match p {
                PipelineError::NoSurvivingGuides | PipelineError::ZeroK => 400,
                PipelineError::Generation(GenerationError::EmptyPrompt) => 400,
                PipelineError::Generation(_) | PipelineError::Adapter(_) => 502,
                PipelineError::Images(_) => 422,
                _ => 500,
            },
            _ => 500,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::Config(_) => "config_error",
            Self::BadRequest(_) => "bad_request",
            Self::NotFound { .. } => "not_found",
            Self::Conflict { code, .. } => code,
            Self::Adapter(_) => "adapter_error",
            Self::Trust(TrustError::NotReturned(_)) => "validation_error",
            Self::Trust(_) => "trust_error",
            Self::Pipeline(p) => match p {
                PipelineError::NoSurvivingGuides => "no_surviving_guides",
                PipelineError::ZeroK => "bad_request",
                PipelineError::Generation(GenerationError::EmptyPrompt) => "bad_request",
                PipelineError::Generation(_) | PipelineError::Adapter(_) => "adapter_error",
                PipelineError::Images(_) => "image_errors",
                _ => "internal_error",
            },
            Self::Store(_) => "store_error",
            Self::Io(_) => "io_error",
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code().to_owned(),
            message: self.to_string(),
        }
    }

    /// True for caller mistakes (bad input, wrong state), false for faults.
    pub fn is_client_error(&self) -> bool {
        (400..500).contains(&self.status())
    }
}
