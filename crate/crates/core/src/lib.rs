//! Closed-loop commonsense knowledge editing on a desk-scale transformer.
//!
//! The crate wires together five pieces:
//!
//! - [`model`]: a small decoder-only transformer exposing the key/value views
//!   of its MLP weights that the editors manipulate;
//! - [`editors`]: rank-one and multi-layer parameter edits plus a codebook
//!   adapter with deferral;
//! - [`verifier`]: plausibility scoring and threshold triage of commonsense
//!   statements;
//! - [`conceptualizer`]: abstraction of instance triples into concepts and
//!   instantiation back into novel instances;
//! - [`store`] and [`pipeline`]: the persistent triple store and the
//!   generate → verify → augment → edit → re-verify loop with its metrics.

pub mod conceptualizer;
pub mod editors;
pub mod error;
pub mod ids;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod relations;
pub mod store;
pub mod tokenizer;
pub mod verifier;

pub use error::{Error, Result};
