//! Surgical error detection over precomputed frame embeddings.
//!
//! A gesture-prompt reasoning block turns a window of frame embeddings into
//! one feature per frame; a two-pathway causal temporal module turns those
//! features into a pyramid of error probabilities. The crate also carries
//! the training loop, a frame-incremental streaming engine, evaluation
//! metrics and the file formats used by the `cog` command line tool.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gvr;
pub mod model;
pub mod mstr;
pub mod objective;
pub mod params;
pub mod stream;
pub mod tensor;
pub mod trainer;

pub use config::{Ablation, ModelConfig};
pub use dataio::{Dataset, EmbeddingSequence, FormatError, SynthConfig, Video};
pub use error::{Error, Result};
pub use gvr::GesturePromptBank;
pub use model::CogModel;
pub use mstr::PredictionPyramid;
pub use objective::LossConfig;
pub use stream::{FrameResult, StreamEngine};
pub use tensor::{Real, Tensor};
pub use trainer::{TrainConfig, TrainState};
