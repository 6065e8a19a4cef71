//! Harland: an embedded document store whose documents change shape at runtime.
//!
//! A document is a bag of named, typed property values. Schemas are named
//! groups of property constraints that can be *enforced* on (and removed from)
//! individual documents at any time; an enforced schema makes the store reject
//! any mutation that would break it. Several schemas may be enforced on the
//! same document, and overlapping properties are shared between them.
//!
//! The crate is layered as follows:
//!
//! * [`model`]: values, bags, documents and schema constraint types.
//! * [`schema`]: the schema registry, conformance checks and slice assignment.
//! * [`store`]: vertical-row persistence, the checkpoint file format and the
//!   content (LOB) store.
//! * [`engine`]: the document cache, handles, locking, prefetch and writeback.
//! * [`query`]: the query algebra, its text syntax, the planner and a
//!   brute-force reference evaluator.
//! * [`coordination`]: commit subscriptions and work-queue style workers.
//! * [`cli`]: the `harland` command-line shell.

pub mod cli;
pub mod coordination;
pub mod engine;
mod error;
#[doc(hidden)]
pub mod fuzzing;
pub mod model;
pub mod query;
pub mod schema;
pub mod store;

pub use engine::{ChangeSummary, CommitEvent, Engine, EngineConfig, Handle, Mutation};
pub use error::{Error, Result};
pub use model::{
    Bag, Constraint, DocumentId, DocumentKind, DocumentSnapshot, Schema, Timestamp, Value,
    ValueType,
};
pub use query::{QueryExpr, QueryPlan};
pub use schema::{SchemaRegistry, Violation, ViolationReason};
