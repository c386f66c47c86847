//! Multi-scale temporal network for continuous sign-language recognition.
//!
//! Frame features pass through an embedding and FC layers, a stack of
//! multi-scale temporal (MST) blocks that halve the frame rate, and an
//! optional transformer encoder. Every level has a gloss classifier trained
//! with CTC; the last level is decoded.

pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod frame_encoder;
pub mod metrics;
pub mod model;
pub mod mst;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use checkpoint::Checkpoint;
pub use config::{EncoderKind, ModelConfig};
pub use ctc::{GlossSequence, LevelLogits};
pub use data::{Corpus, GrammarConfig, Sample, Split, ToyGrammar};
pub use error::{Error, Result};
pub use frame_encoder::FeatureSequence;
pub use metrics::EditBreakdown;
pub use model::Network;
pub use tensor::Tensor;
