//! Tokenizer, vocabulary and the shared transformer turn encoder.

mod model;
pub mod tokenizer;
pub mod vocab;

pub use model::{EncodedTurn, Model, ModelConfig, Parameters};
pub(crate) use model::{embed_rows, HeadIds, TripletIds};
pub use tokenizer::{tokenize, tokenize_text, tokenize_with_limit, TokenizedTurn};
pub use vocab::Vocab;
