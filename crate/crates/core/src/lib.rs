//! Named-entity recognition by local detection: every fragment of a sentence
//! is encoded together with its left and right contexts by the fixed-size
//! ordinally forgetting encoding (FOFE), classified by a feedforward network,
//! and overlapping detections are resolved greedily.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod fragments;
pub mod inference;
pub mod network;
pub mod synthetic;
mod util;

pub use error::{Error, Result};
