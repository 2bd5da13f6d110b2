//! Labelled image collections and their sources.

pub mod idx;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::Tensor;
use crate::scalar::Scalar;

pub use idx::load_idx;
pub use synth::{synth_shapes, ShapeKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Test,
}

/// `N` images of shape `(c, h, w)` with values in `[0, 1]`, and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub name: String,
    pub role: SplitRole,
    images: Tensor<T>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        name: impl Into<String>,
        role: SplitRole,
        images: Tensor<T>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Consistency(format!(
                "images must be [N, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Consistency(format!("label {l} outside 0..{num_classes}")));
        }
        if images.data().iter().any(|v| *v < T::zero() || *v > T::one()) {
            return Err(Error::Consistency("pixel values outside [0, 1]".into()));
        }
        Ok(Dataset {
            name: name.into(),
            role,
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Widens the label space, e.g. when a split lacks the highest class.
    pub fn set_num_classes(&mut self, num_classes: usize) -> Result<()> {
        if num_classes < self.num_classes {
            return Err(Error::invalid("num_classes", "can only grow"));
        }
        self.num_classes = num_classes;
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Image `i` as a `(c, h, w)` tensor.
    pub fn image(&self, i: usize) -> Tensor<T> {
        Tensor::from_raw(self.image_shape().to_vec(), self.images.row(i).to_vec())
    }

    /// Stacks the selected examples into a `[b, c, h, w]` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per = self.image_shape().iter().product::<usize>();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend(self.image_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_raw(shape, data), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("indices", "empty subset"));
        }
        let (images, labels) = self.batch(indices);
        Ok(Dataset {
            name: self.name.clone(),
            role: self.role,
            images,
            labels,
            num_classes: self.num_classes,
        })
    }

    /// The first `n` examples (all of them when `n >= len`).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}
