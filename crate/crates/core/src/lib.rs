//! Cycle-consistent visual question answering: an attention-based answering
//! model, an answer-conditioned question generator, the joint training loop
//! with gating and late activation, consensus-score evaluation over
//! rephrasing groups, and failure prediction.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod failure;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vqa;
pub mod vqg;

pub use error::{Error, Result};
