//! Desk-scale provenance tracking for fine-tunable vision-language models.
//!
//! The crate builds adversarial trigger images against a small
//! vision-conditioned language model, simulates downstream fine-tuning, and
//! verifies model lineage through black-box trigger queries. Everything is
//! deterministic given a seed.

pub mod attack;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod vlm;
pub mod vocab;

pub use error::{Error, Result};
pub use params::{GradMap, Group, ParamStore};
pub use tape::{finite_difference_gradient, Gradients, LeafKey, Tape, ValueId};
pub use tensor::Tensor;
