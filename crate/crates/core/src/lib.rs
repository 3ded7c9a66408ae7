//! Task-vector retrieval for small in-context learners.

pub mod bm25;
pub mod container;
pub mod error;
pub mod inference;
pub mod io;
pub mod library;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod retrieval;
pub mod tasks;

pub use error::{Error, Result};
