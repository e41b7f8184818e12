//! Semantic computing network toolkit.
//!
//! Combines a frozen, knowledge-driven semantic-tree classifier (primitive
//! detection, binary relation vectors, per-class count templates) with a
//! small capsule network trained under an adaptive joint loss, plus an
//! FGSM/BIM adversarial-robustness harness.
//!
//! Start with the runnable examples (`cargo run --release --example ...`)
//! or the `scn` binary for the end-to-end pipelines.

pub mod adversarial;
pub mod capsnet;
pub mod data;
pub mod error;
pub mod relation;
pub mod tensor;
pub mod training;
pub mod tree;
pub mod vision;

pub use error::{Result, ScnError};
