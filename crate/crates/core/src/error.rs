use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{what}:{line}: {message}")]
    Parse {
        what: String,
        line: usize,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("zero vector for phrase `{0}`")]
    ZeroVector(String),

    #[error("initialization failed: no identically spelled phrases in both vocabularies")]
    NoIdenticalPhrases,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unknown phrase `{0}`")]
    UnknownPhrase(String),

    #[error("temperature is not identifiable: {0}")]
    Unidentifiable(String),

    #[error("feature vector length {got} does not match weight vector length {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty phrase table intersection{0}")]
    EmptyIntersection(String),

    #[error("stream `{stream}` has {available} pairs but {requested} were requested")]
    InsufficientPairs {
        stream: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("line count mismatch: {left} has {left_lines} lines, {right} has {right_lines}")]
    LineCountMismatch {
        left: String,
        left_lines: usize,
        right: String,
        right_lines: usize,
    },

    #[error("missing path: {0}")]
    MissingPath(PathBuf),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            line,
            message: message.into(),
        }
    }
}
