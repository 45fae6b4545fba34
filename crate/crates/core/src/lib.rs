//! Constrained decoding as search over an explicit tree of token sequences.

pub mod constraints;
pub mod decoders;
pub mod error;
pub mod lm;
pub mod optimizer;
pub mod oracle;
pub mod runner;
pub mod tree;

pub use error::DecodeError;
