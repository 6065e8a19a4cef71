use std::io;

use thiserror::Error;

use crate::model::{DocumentId, DocumentKind};
use crate::query::ParseError;
use crate::schema::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown document {0}")]
    UnknownDocument(DocumentId),

    #[error("unknown schema {0:?}")]
    UnknownSchema(String),

    #[error("unknown collection {0}")]
    UnknownCollection(DocumentId),

    #[error("schema {0:?} is already defined")]
    DuplicateName(String),

    #[error("schema {existing:?} already constrains property {property:?} differently")]
    InconsistentSchema { existing: String, property: String },

    #[error("document does not conform ({} violation(s))", .0.len())]
    NotConforming(Vec<Violation>),

    #[error("mutation rejected ({} violation(s))", .0.len())]
    SchemaViolation(Vec<Violation>),

    #[error("document {id} is a {actual} document, expected {expected}")]
    WrongKind { id: DocumentId, actual: DocumentKind, expected: DocumentKind },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid name {0:?}")]
    InvalidName(String),

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("corrupt store: {0}")]
    CorruptStore(String),

    #[error("storage failure: {0}")]
    StorageFailure(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// The schema violations carried by this error, if any.
    pub fn violations(&self) -> &[Violation] {
        match self {
            Error::NotConforming(v) | Error::SchemaViolation(v) => v,
            _ => &[],
        }
    }
}
