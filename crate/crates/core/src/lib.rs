//! Transformer pretraining for n-dimensional numeric sensor sequences.
//!
//! Continuous readings are min-max scaled and discretized into `k` bins per
//! dimension; a Transformer with a linear input embedding and one parallel bin
//! classifier per dimension is pretrained on reconstruction, masked-cell or
//! next-step prediction, and the pretrained body is then fine-tuned with a
//! fresh classification head for activity recognition.
//!
//! All numeric code is generic over [`Scalar`]; the aliases below fix the two
//! supported precisions.

pub mod checkpoint;
pub mod dataset;
pub mod downstream;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod preprocess;
pub mod pretrain;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use downstream::{FinetuneConfig, LabeledWindowSet, Metrics};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Arch, Model, ModelConfig, OutputHead, Pooling};
pub use params::ParamSet;
pub use preprocess::{BinLabels, Scaler, SensorFrame, SequenceBatch};
pub use pretrain::{PretrainRunConfig, Task};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type SequenceBatch32 = SequenceBatch<f32>;
pub type SequenceBatch64 = SequenceBatch<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
