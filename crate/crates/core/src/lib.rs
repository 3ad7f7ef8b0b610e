pub mod data;
pub mod edit;
pub mod error;
pub mod model;
pub mod nn;
pub mod recipe;
pub mod sequence;
pub mod tokenizer;
pub mod train;
pub mod tts;

pub use error::{NepError, Result};
