//! Structural debiasing for a toy autoregressive transformer.
//!
//! The crate instruments a small GPT-style model so that every forward pass
//! exposes per-layer attention tensors and hidden states, then fine-tunes it
//! against a counterfactual objective: attention routing and hidden
//! representations must stay invariant when a prompt's gendered pronoun is
//! swapped, while teacher-anchored stability terms protect everything else.
//! A diagnostics suite (spectral divergence, hidden drift, logit lens,
//! activation patching) verifies the effect structurally rather than only at
//! the output.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod graph_loss;
pub mod model;
pub mod rng;
pub mod stability_loss;
pub mod trainer;

pub use autodiff::{grad_check, AutodiffError, Tape, Tensor, ValueId};
pub use data::{build_corpus, Corpus, CounterfactualPair, PairKind, Vocabulary};
pub use diagnostics::DiagnosticReport;
pub use model::{Model, ModelConfig, Trace};
pub use stability_loss::{PronounPair, SensitiveMask};
pub use trainer::{LossBundle, TrainConfig};

/// Token identifier inside the closed vocabulary.
pub type TokenId = usize;
