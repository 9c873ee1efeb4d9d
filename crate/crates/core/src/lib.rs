//! Training and evaluation of a small language model that either answers a
//! question from supplied passages or emits a fixed abstention response.
//!
//! The pipeline is: synthetic corpus ([`corpus`]) → multi-task supervised
//! fine-tuning ([`sft`]) → preference-trained reward model ([`reward`]) →
//! confidence-shaped PPO ([`ppo`]) → answerability metrics ([`metrics`]).
//! [`experiment`] wires these into ablation arms and reports.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod ppo;
pub mod reward;
pub mod seed;
pub mod selftest;
pub mod sft;
pub mod vocab;

pub use error::{Result, SaluError};
pub use model::{DecodeMode, HeadKind, LanguageModel, ModelConfig, Transformer};
