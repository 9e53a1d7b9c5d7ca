//! Continual learning with one low-rank adapter expert per dataset on a
//! frozen vision transformer, routed at inference by k-means prototypes.

pub mod error;
pub mod experts;
pub mod harness;
pub mod lora;
pub mod metrics;
pub mod router;
pub mod scenarios;
pub mod tensor;
pub mod vit;

pub use error::{Error, ErrorKind, Result};
pub use experts::{Expert, TrainConfig};
pub use harness::{Method, RunConfig, RunRecord, SweepAxis};
pub use lora::{count_trainable_params, AdapterSet};
pub use metrics::AccuracyMatrix;
pub use router::{Extractor, PrototypeSet, Router};
pub use scenarios::{DatasetSequence, Scenario};
pub use tensor::{Gradients, Tape, Tensor, Var};
pub use vit::{ModelConfig, ViTParams};
