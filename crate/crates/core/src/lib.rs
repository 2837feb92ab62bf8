//! Radiology report summarization: corpus preparation, gap-sentence
//! pretraining, Fisher-anchored fine-tuning, distillation, tagging and
//! evaluation on a small reverse-mode tensor library.

pub mod corpus;
pub mod distillation;
pub mod error;
pub mod eval;
pub mod gsg;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tagging;
pub mod tensor;
pub mod training;

pub use corpus::{Report, Segmenter};
pub use error::{Error, Result};
pub use metrics::{CorpusScores, MetricRow};
pub use model::{Model, ModelConfig, ParameterStore, Vocab};
pub use tensor::Tensor;
pub use training::{Example, TrainConfig};
