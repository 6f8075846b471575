use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed dialogue {dialogue}: {message}")]
    Dialogue { dialogue: String, message: String },

    #[error("invalid ontology: {0}")]
    Ontology(String),

    #[error("slot {0} is not in the ontology")]
    UnknownSlot(String),

    #[error("value {value:?} of C-type slot {slot} is not one of yes, no, dontcare")]
    CtypeValue { slot: String, value: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },

    #[error("script line {line}: {message}")]
    Script { line: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (files, configs, data) as
    /// opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NonFiniteGradient { .. })
    }
}
