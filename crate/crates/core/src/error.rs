use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// `Usage`/`Argument`/`Config` are caller mistakes, everything else is a
/// data or model failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Corpus / checkpoint file problems. `id` names the offending
    /// utterance when known.
    #[error("format error{}: {msg}", id.as_deref().map(|i| format!(" ({i})")).unwrap_or_default())]
    Format { id: Option<String>, msg: String },

    #[error("tag parse error at position {pos}: {msg}")]
    TagParse { pos: usize, msg: String },

    /// A trailing unclosed `<dysfl>` on a partial stream. Distinct from
    /// `TagParse` so streaming display can keep the prefix.
    #[error("incomplete tag sequence: span opened at position {pos} is unclosed")]
    TagIncomplete { pos: usize },

    #[error("training error: {0}")]
    Training(String),

    #[error("segmentation error: {0}")]
    Segmentation(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn format(id: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            id: Some(id.into()),
            msg: msg.into(),
        }
    }

    pub fn format_anon(msg: impl Into<String>) -> Self {
        Error::Format {
            id: None,
            msg: msg.into(),
        }
    }
}
