//! Core algorithms for training a classifier that doubles as an
//! energy-based model.
//!
//! The pieces, bottom up: [`tensor`] (flat f64 tensors), [`net`] (split
//! feed-forward networks with hand-derived gradients), [`sampler`] (Langevin
//! chains with exact propagation accounting), [`init`] (class-conditional
//! Gaussian chain initialization), [`buffer`] (persistent replay buffer),
//! [`trainer`] (the joint discriminative/generative loop), [`eval`]
//! (calibration, OOD, and adversarial metrics), and [`checkpoint`]
//! (a versioned binary container for all persistent state).

pub mod buffer;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod init;
pub mod net;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use buffer::ReplayBuffer;
pub use data::LabeledDataset;
pub use error::{Error, Result};
pub use eval::AttackConfig;
pub use init::InformativeInit;
pub use net::{BnMode, Layer, ParamGrads, SplitNetwork};
pub use sampler::{ChainTrace, SamplerConfig, SamplerKind};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainReport};
