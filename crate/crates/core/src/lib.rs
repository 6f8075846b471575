//! Dialogue state tracking with a shared turn encoder, a domain-constrained
//! span tagger and light-weight classifiers for categorical slots and state
//! corrections.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
#[doc(hidden)]
pub mod fuzzing;
pub mod heads;
pub mod tensor;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
