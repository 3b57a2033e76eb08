use crate::algorithms::AlgoError;
use crate::config::ConfigError;
use crate::corpus::CorpusError;
use crate::eval::{DatasetError, EvalError};
use crate::generator::GenError;
use crate::index::IndexError;
use crate::retriever::RetrievalError;
use crate::service::http::ServeError;

/// Any failure a command can end with.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error(transparent)]
    Algorithm(#[from] AlgoError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// 2 for problems the user fixes in their inputs, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Dataset(_) => 2,
            Error::Corpus(e) => match e {
                CorpusError::Io { .. } => 1,
                _ => 2,
            },
            Error::Eval(EvalError::Misaligned { .. } | EvalError::ForeignRun { .. }) => 2,
            Error::Generation(GenError::Config(_) | GenError::InvalidParams(_)) => 2,
            Error::Algorithm(AlgoError::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Usage("x".into()).exit_code(), 2);
        assert_eq!(
            Error::Corpus(CorpusError::Malformed {
                line: 3,
                reason: "r".into()
            })
            .exit_code(),
            2
        );
        assert_eq!(Error::Generation(GenError::Backend("down".into())).exit_code(), 1);
        assert_eq!(
            Error::Eval(EvalError::Misaligned {
                component: "seed".into(),
                first: "a".into(),
                second: "b".into()
            })
            .exit_code(),
            2
        );
        assert_eq!(Error::Retrieval(RetrievalError::Backend("x".into())).exit_code(), 1);
    }
}
