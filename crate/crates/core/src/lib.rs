//! Intent-aware semantic-cache query processing.
//!
//! The pipeline parses a raw query, expands it over a synset taxonomy,
//! tags and disambiguates entities with a spectrally-normalized attention
//! encoder, classifies its intent with a contextual fuzzy rule system, and
//! ranks structured corpus records with a GRU cell augmented by multi-head
//! learnable attention. Answers are cached and served back through a
//! cosine-similarity gate.

pub mod cache;
pub mod clustering;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod expansion;
pub mod features;
pub mod fixtures;
pub mod intent;
pub mod linalg;
pub mod metrics;
pub mod params;
pub mod parser;
pub mod ranker;

pub use error::{Error, Result};
