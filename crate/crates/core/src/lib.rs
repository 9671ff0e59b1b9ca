//! Decoupled learning for parameterized image operators.
//!
//! A base convolutional network processes images; a small weight-learning
//! network maps an operator parameter vector γ to some of its weights.

pub mod analysis;
pub mod basenet;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod hypernet;
pub mod image;
pub mod metrics;
pub mod model;
pub mod operators;
pub mod train;

pub use basenet::{count_parameters, forward_base, BaseNetConfig, ParameterCounts, Stage, WeightSet, Weights};
pub use error::{Error, Result};
pub use hypernet::{ActivationCache, HyperConfig, LearnedSlotSpec, WeightLearningNet};
pub use image::Image;
pub use model::Model;
pub use operators::{GammaCodec, OperatorKind, OperatorSpec, ParameterVector};
pub use train::{train, TrainConfig};
