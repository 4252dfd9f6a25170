//! Joint profile-aware intent detection and slot filling.
//!
//! The crate bundles a small reverse-mode autodiff tape, the encoder and
//! decoder layers of the model, corpus handling, metrics, and a training
//! loop. Everything runs on the CPU in double precision.

pub mod bio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dd;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod proslu;
pub mod slot2intent;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{Ablation, ModelConfig, ProfileField, ProfileKind, TrainConfig};
pub use error::{Error, Result};
pub use params::{ParamId, ParameterStore};
pub use tape::{backward, Tape, ValueId};
pub use tensor::Tensor;
