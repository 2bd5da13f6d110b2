//! Masked-input consistency regularization for image classifiers, with the
//! tooling to measure what it does to explanations: a small autodiff tensor
//! library, classifiers, a LIME-style local linear explainer, five
//! explanation-quality metrics and a Bayesian signed test.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the harness uses.

pub mod data;
pub mod error;
pub mod explain;
pub mod fixtures;
pub mod harness;
pub mod masking;
pub mod model;
pub mod nd;
pub mod revel;
pub mod scalar;
pub mod shield;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = nd::Tensor<f64>;
pub type Tape = nd::Tape<f64>;
pub type Classifier = model::Classifier<f64>;
pub type AdamState = model::AdamState<f64>;
pub type Dataset = data::Dataset<f64>;

pub type Tensor32 = nd::Tensor<f32>;
pub type Tape32 = nd::Tape<f32>;
pub type Classifier32 = model::Classifier<f32>;
