//! Deterministic toy transformer runtime with named hook sites.

pub mod config;
mod decode;
pub mod model;
pub mod ops;
pub mod site;
pub mod tokenizer;
pub mod train;
pub mod weights;

/// Vocabulary index.
pub type TokenId = u32;

pub use config::{Arch, ModelConfig, Topology, BOS, EOS, PAD, UNK};
pub use decode::DEFAULT_MAX_NEW;
pub use model::{all_sites, AttentionTrace, Hooks, Inputs, Model, RunOutput};
pub use site::{ActivationRecord, AttentionKind, AttnBlock, HookSite, KnockoutMode, SiteKind, Stream};
pub use tokenizer::{join_pieces, normalize, pre_tokenize, Vocab};
pub use train::{memorization, memorized_by_key, train_from, train_toy, TrainOptions, TrainReport, TrainingItem};
pub use weights::Weights;
