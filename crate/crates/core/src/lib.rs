pub mod cmx;
pub mod dsp;
pub mod substrate;
pub mod tokenizer;
pub mod armodel;
pub mod error;
pub mod metrics;
pub mod pipeline;

pub use error::{Error, Result};
