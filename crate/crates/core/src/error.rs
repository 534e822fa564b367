use std::io;

use thiserror::Error;

use crate::adkernel::KernelError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("{what}: expected length {expected}, found {found}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite {term} term in loss")]
    NonFiniteLoss { term: &'static str },
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteTraining { epoch: usize, batch: usize },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("quadrature: {0}")]
    Quadrature(String),
    #[error("line {line}: expected 26 columns, found {found}")]
    ColumnCount { line: usize, found: usize },
    #[error("line {line}: cannot parse `{token}` as a number")]
    Token { line: usize, token: String },
    #[error("line {line}: unit {unit} jumps to cycle {found}, expected {expected}")]
    NonContiguous {
        line: usize,
        unit: u32,
        expected: u32,
        found: u32,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
