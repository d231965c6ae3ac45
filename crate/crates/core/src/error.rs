//! Crate-wide error type.

use std::path::PathBuf;

use crate::engine::Diagnostic;

/// Errors produced anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid hook site {site}: {reason}")]
    Addressing { site: String, reason: String },

    #[error("sequence of length {len} exceeds max_seq {max}")]
    Length { len: usize, max: usize },

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    Token { id: u32, vocab: usize },

    #[error("input mismatch: {0}")]
    Input(String),

    #[error("plan rejected with {} diagnostic(s): {}", .0.len(), join_diagnostics(.0))]
    Plan(Vec<Diagnostic>),

    #[error("capability mismatch: {0}")]
    Capability(String),

    #[error("unknown or stale run id {0}")]
    StaleRun(u64),

    #[error("training failed: {0}")]
    Training(String),

    #[error("{}:{line}: {message}", .file.display())]
    Corpus {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("corpus generation failed: {0}")]
    Generation(String),

    #[error("prefix absorption failed: {0}")]
    Absorption(String),

    #[error("subject span error: {0}")]
    Span(String),

    #[error("causal tracing: {0}")]
    Trace(String),

    #[error("guard violated: {0}")]
    Guard(String),

    #[error("missing column `{column}` in {file}")]
    Schema { column: String, file: String },

    #[error("wire protocol: {0}")]
    Wire(String),

    #[error("remote backend error [{code}]: {message}")]
    Remote { code: String, message: String },

    #[error("http: {0}")]
    Http(String),

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn join_diagnostics(d: &[Diagnostic]) -> String {
    d.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
