//! Question-answer prompt mining and visual-aware prompting for small
//! multimodal reasoners.
//!
//! The pipeline has three stages:
//!
//! 1. [`vqg`]: train a question generator `P(question | image, answer)` on
//!    top of a frozen decoder and a trainable visual connector.
//! 2. [`promptgen`]: turn an image's (stoplist-filtered) tags into candidate
//!    question/answer pairs, keep the `P` most similar to the target
//!    question and render them as one prompt string.
//! 3. [`reasoner`]: encode that prompt through the [`vapm`] module (prompt
//!    encoder, visual gated fusion, resampler) and feed the resulting prompt
//!    embeddings to a frozen decoder together with visual features and the
//!    instruction.
//!
//! Everything is differentiated by the small tape in [`numerics`]; the
//! models are toy-sized so the whole pipeline trains on one CPU core.

pub mod corpus;
pub mod decoder;
pub mod embedding;
mod error;
pub mod numerics;
pub mod pipeline;
pub mod promptgen;
pub mod reasoner;
pub mod vapm;
pub mod vqg;

pub use error::{Error, Result};
