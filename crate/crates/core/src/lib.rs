//! Vehicle make, model and color recognition.
//!
//! The crate covers the whole offline pipeline: dataset manifests and
//! benchmark adapters ([`manifest`]), box alignment and masking
//! ([`preprocess`]), the two classifiers ([`model`]), embedding-based pair
//! verification ([`verify`]), semi-automated dataset pruning ([`prune`]) and
//! benchmark evaluation ([`eval`]).

pub mod error;
pub mod eval;
pub mod kvline;
pub mod manifest;
pub mod model;
pub mod preprocess;
pub mod prune;
pub mod verify;

pub use error::{Error, ErrorKind, Result};
