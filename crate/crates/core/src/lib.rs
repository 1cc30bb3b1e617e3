//! Head-wise matching of Transformer sequence representations for pair
//! classification, built on a small reverse-mode autodiff engine.
//!
//! Sequences are encoded independently; matching compares the classification
//! position of each attention head across two sequences, head by head, and
//! aggregates per layer and then across layers. Because the encoder never sees
//! both sequences at once, representations can be cached and reused for
//! all-pairs scoring (see [`cache`]).

pub mod autodiff;
mod binio;
pub mod cache;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod kv;
pub mod matching;
pub mod model;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
