pub mod archive;
pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod loader;
pub mod losses;
pub mod masking;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod seeding;
pub mod tensor;
pub mod toybench;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use config::{Config, Precision};
pub use data::{DatasetManifest, Sample, Split};
pub use evaluation::{Protocol, ProtocolRule, RetrievalResult};
pub use model::CcafModel;
pub use trainer::{CheckpointRef, TrainState, Trainer};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = CcafModel<f32>;
pub type Model64 = CcafModel<f64>;
pub type TrainState32 = TrainState<f32>;
pub type TrainState64 = TrainState<f64>;
