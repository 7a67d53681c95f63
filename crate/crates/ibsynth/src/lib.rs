//! Dataset synthesis for fine-grained visual instruction tuning.
//!
//! The library turns a manifest of labeled images into instruction-tuning
//! rows in two steps: (1) sample many noisy descriptions per image, score
//! every candidate concept of the image's class against them with a
//! contrastive bound, and keep the concepts that stand out; (2) either
//! rewrite a grounded answer from the selected concepts or sample candidate
//! answers and keep the one that scores best against those concepts.
//! Everything provider-facing sits behind traits with deterministic local
//! implementations, so the full pipeline runs offline and reproducibly.

pub mod answers;
pub mod cache;
pub mod cli;
pub mod corpus;
pub mod describe;
pub mod embed;
pub mod error;
pub mod infonce;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod providers;
pub mod selection;
pub mod simulate;
pub mod util;

pub use error::{Error, Result};
