//! Conditional relational inference over interacting multi-body systems.
//!
//! The crate trains a latent-variable generative model that, given a
//! per-system condition vector and a single initial frame, generates full
//! multi-body trajectories. The interaction structure between bodies can be
//! supplied (perfect graph), learned as a deterministic parameter (imperfect
//! graph), or inferred variationally (NRI / fNRI encoders with a concrete
//! relaxation). A synthetic conditioned spring system with known ground-truth
//! graphs provides the training corpus and the verification target.
//!
//! Layered roughly bottom-up:
//!
//! * [`tensor`], [`tape`] — dense f64 tensors and reverse-mode differentiation
//! * [`nn`], [`optim`] — parameter store, MLP/GRU blocks, Adam, gradient oracle
//! * [`data`] — spring simulator, corpus generation, normalization, splits, file I/O
//! * [`encoders`], [`decoder`] — interaction-latent producers and the
//!   conditional autoregressive graph decoder
//! * [`training`] — objectives, the optimization loop, checkpoints
//! * [`baselines`], [`evaluation`] — comparison systems and benchmark reporting

pub mod data;
pub mod decoder;
pub mod edges;
pub mod encoders;
pub mod error;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod training;
pub mod tensor;

#[cfg(test)]
pub(crate) mod test_support;

pub use error::{Error, Result};
pub use tensor::Tensor;
