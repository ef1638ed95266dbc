pub mod baselines;
pub mod checkpoint;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod gradcore;
pub mod lexicon;
pub mod models;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
