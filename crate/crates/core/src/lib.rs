//! Federated graph foundation codebook.
//!
//! Toy-scale gVQ-MAE backbones trained on partitioned text-attributed graphs,
//! with two-phase server aggregation: frequency-guided codebook alignment and
//! similarity-personalized averaging within domains, then
//! distinctiveness-weighted global integration across domains.

pub mod aggregation;
pub mod autodiff;
pub mod error;
pub mod federation;
pub mod finetune;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod tensor;
pub mod verify;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use graph::{ClientDataset, DomainTag, GraphLabel, LabelLevel, Labels, TextAttributedGraph};
pub use tensor::Tensor;
