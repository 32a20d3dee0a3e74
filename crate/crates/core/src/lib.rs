//! Toy-scale causal-intervention lab for filler-gap dependencies.
//!
//! The pipeline trains a small GPT-2-style decoder on a synthetic corpus,
//! learns one-dimensional alignment directions at every (layer, slot) site of
//! the residual stream, and measures how strongly swapping the projection on
//! that direction moves the model from the base continuation to the source
//! continuation.

pub mod das;
pub mod fsutil;
pub mod grammar;
pub mod model;
pub mod tensor;
pub mod eval;
pub mod stats;
pub mod cli;
