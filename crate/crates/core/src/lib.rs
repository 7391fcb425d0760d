//! Joint contrastive + sentence-vector-conditioned masked language model
//! training for dense FAQ retrieval.

pub mod corpus;
pub mod error;
pub mod model;
pub mod objectives;
pub mod real;
pub mod retrieval;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
