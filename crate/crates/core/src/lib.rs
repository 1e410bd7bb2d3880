//! Training-free visual evidence retrieval driven by next-token uncertainty.
//!
//! The engine backpropagates an uncertainty objective (by default the Shannon
//! entropy of the next-token distribution) to the visual token embeddings of a
//! vision-language model, turns the per-token gradient norms into a saliency
//! grid, extracts and ranks connected regions from it, and iteratively zooms
//! into the best regions until the spatial entropy of the saliency mask stops
//! decreasing.
//!
//! Models are reached through [`protocol::GradientBackend`]. A small
//! deterministic differentiable model ([`toy::ToyModel`]) runs in-process; real
//! models are served by an external process speaking the line-delimited wire
//! protocol in [`protocol`].

pub mod error;
pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod objective;
pub mod pipeline;
pub mod protocol;
pub mod refine;
pub mod toy;

pub use error::{Error, Result};
