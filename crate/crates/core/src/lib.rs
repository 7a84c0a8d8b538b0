pub mod data;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod masking;
pub mod numerics;
pub mod pretrain;
pub mod spatial;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};
