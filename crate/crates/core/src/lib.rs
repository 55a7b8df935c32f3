//! Adversarial-input laboratory: a small f64 neural-network stack with
//! reverse-mode differentiation, four input-crafting attacks, three
//! hardening schemes, and a radius-probing tampering detector.

pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detect;
pub mod error;
pub mod experiments;
pub mod grad;
mod kernels;
pub mod network;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{Checkpoint, TrainMeta};
pub use error::{Error, ErrorCategory, Result};
pub use network::{LayerSpec, Model, NetworkSpec, Weights};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
pub use attacks::{AttackConfig, AttackKind, AttackResult};
pub use config::RunConfig;
pub use data::Dataset;
pub use detect::{DetectionReport, ProbeParams, Verdict};
pub use trainer::TrainConfig;
