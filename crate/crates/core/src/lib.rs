//! Sequence-level policy-gradient training lab.
//!
//! A self-contained workbench for studying self-critical sequence training
//! (SCST) and its comparison baselines on toy-scale recurrent captioning
//! models:
//!
//! - a minimal differentiable core (dense f64 tensors, paired
//!   forward/backward primitives, ADAM),
//! - maxout-LSTM captioners in three wirings (fc, att2in, att2all) with
//!   handwritten backprop through time,
//! - greedy / beam / ensemble decoding,
//! - from-scratch CIDEr-D, BLEU-4 and ROUGE-L usable as RL rewards,
//! - the estimator ladder: REINFORCE, learned baseline, MIXER, SCST,
//!   TD-SCST and true SCST, with gradient-variance and entropy diagnostics,
//! - a synthetic-scene dataset generator and the training/eval harness.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod rl;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use adam::{AdamConfig, GradBuffer, ParamStore};
pub use error::{Error, Result};
pub use model::{Arch, Features, Model, ModelConfig, RolloutMode, RolloutRecord};
pub use tensor::Tensor;
pub use vocab::{TokenId, Vocab, BOS, EOS, UNK};
