pub mod assembly;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod heads;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod schema;
pub mod synth;
pub mod tokenizer;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
