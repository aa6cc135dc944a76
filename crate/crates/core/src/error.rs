use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-facing configuration (ranges, weights, windows).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation precondition (shapes, positions).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Schedule arithmetic left its valid domain.
    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("backend error{}: {message}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    Backend {
        message: String,
        context: Option<String>,
    },

    /// A loss or gradient went non-finite; optimization was aborted.
    #[error("numeric abort at {location}: {message}")]
    NumericAbort { location: String, message: String },

    #[error("empty edit region")]
    EmptyMask,

    #[error("missing inversion trajectory: {0}")]
    MissingTrajectory(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn backend(msg: impl Into<String>) -> Self {
        Error::Backend {
            message: msg.into(),
            context: None,
        }
    }

    /// Attaches context (iteration index, timestep) to a backend error.
    /// Other variants pass through untouched.
    pub fn with_context(self, ctx: impl Into<String>) -> Self {
        match self {
            Error::Backend { message, context } => {
                let ctx = ctx.into();
                let context = Some(match context {
                    Some(prev) => format!("{ctx}; {prev}"),
                    None => ctx,
                });
                Error::Backend { message, context }
            }
            other => other,
        }
    }

    /// Stable short name recorded in manifests.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Schedule(_) => "schedule",
            Error::Backend { .. } => "backend",
            Error::NumericAbort { .. } => "numeric_abort",
            Error::EmptyMask => "empty_mask",
            Error::MissingTrajectory(_) => "missing_trajectory",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}
