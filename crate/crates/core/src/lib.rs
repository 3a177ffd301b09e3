//! Learned feature generation for tabular data.
//!
//! A transformer policy emits programs in a small token language; each program
//! adds derived columns to a dataset. The policy is pretrained against a
//! frozen surrogate network and then fine-tuned with PPO on downstream metric
//! improvements.

pub mod dataset;
pub mod evaluators;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod ppo;
pub mod pretrain;
pub mod seed;
pub mod synth;
pub mod transform;

pub use dataset::{FeatureColumn, FeatureKind, FeatureStats, Split, TabularDataset, TaskKind};
pub use transform::{FeatureProgram, Grammar, Token, TransformSequence};
