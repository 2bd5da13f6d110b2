//! Classifiers, the cross-entropy loss and the Adam optimizer.

mod adam;
pub mod checkpoint;
mod classifier;
mod loss;

pub use adam::{AdamConfig, AdamState};
pub use classifier::{Architecture, Classifier, Layer, Predictor};
pub use loss::cross_entropy;
