//! Architecture-independent multimodal fusion for drug-drug interaction
//! event prediction.
//!
//! The pipeline: knowledge-graph channels and prompt embeddings come in
//! (`kgdata`), per-drug modality representations are encoded (`encoders`),
//! assembled into typed token sequences per drug pair (`tokenizer`), fused by
//! a transformer block with expert-choice mixture-of-experts aggregation
//! (`fusion`), and trained/evaluated under cold-start splits (`trainer`,
//! `eval`). Everything differentiable runs on the `numkernel` tape.

pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod kgdata;
pub mod numkernel;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
