//! Black boxes with known explanations, for checking explainers and metrics.

use crate::error::{Error, Result};
use crate::masking::{neutral_value, SegmentGrid};
use crate::model::Predictor;
use crate::nd::Tensor;

/// A model that is exactly linear in the segment feature space of one image:
/// `f(x) = z(x)ᵀA + b`, where `z_i(x)` is 1 when segment `i` holds its
/// original mean and 0 when it holds the image's neutral value.
///
/// Every row of `A` sums to zero and `b` is a probability vector with enough
/// slack that `f` stays on the simplex for every binary `z`.
#[derive(Clone, Debug)]
pub struct LinearFeatureModel {
    grid: SegmentGrid,
    original: Vec<f64>,
    neutral: f64,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

fn segment_means(grid: &SegmentGrid, pixels: &[f64]) -> Vec<f64> {
    let [c, h, w] = grid.image_shape();
    grid.segments()
        .iter()
        .map(|r| {
            let mut sum = 0.0;
            for ch in 0..c {
                for y in r.top..r.top + r.height {
                    let row = ch * h * w + y * w;
                    sum += pixels[row + r.left..row + r.left + r.width].iter().sum::<f64>();
                }
            }
            sum / (c * r.area()) as f64
        })
        .collect()
}

impl LinearFeatureModel {
    pub fn new(grid: &SegmentGrid, image: &Tensor<f64>, a: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Self> {
        if a.len() != grid.len() || a.iter().any(|r| r.len() != b.len()) || b.len() < 2 {
            return Err(Error::invalid("a", "need one row per segment and one column per class"));
        }
        if a.iter().any(|r| r.iter().sum::<f64>().abs() > 1e-12) || (b.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("a", "rows of A must sum to 0 and b to 1"));
        }
        for (c, &bc) in b.iter().enumerate() {
            let neg: f64 = a.iter().map(|r| r[c].min(0.0)).sum();
            let pos: f64 = a.iter().map(|r| r[c].max(0.0)).sum();
            if bc + neg < 0.0 || bc + pos > 1.0 {
                return Err(Error::invalid("b", format!("class {c} can leave [0, 1]")));
            }
        }
        let fill = neutral_value(image)?;
        let neutral = fill.iter().sum::<f64>() / fill.len() as f64;
        let original = segment_means(grid, image.data());
        if original.iter().any(|o| (o - neutral).abs() < 1e-6) {
            return Err(Error::invalid("image", "a segment mean equals the neutral value"));
        }
        Ok(LinearFeatureModel {
            grid: grid.clone(),
            original,
            neutral,
            a,
            b,
        })
    }

    /// Deterministic coefficients: feature `i` pushes class `i mod k` up and
    /// the next class down by a varying amount.
    pub fn patterned(grid: &SegmentGrid, image: &Tensor<f64>, num_classes: usize) -> Result<Self> {
        let n = grid.len();
        let scale = 0.5 / n as f64;
        let a = (0..n)
            .map(|i| {
                let mut row = vec![0.0; num_classes];
                let mag = scale * (0.25 + ((i * 37) % 11) as f64 / 10.0);
                row[i % num_classes] += mag;
                row[(i + 1) % num_classes] -= mag;
                row
            })
            .collect();
        LinearFeatureModel::new(grid, image, a, vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn coefficients(&self) -> &[Vec<f64>] {
        &self.a
    }

    pub fn intercept(&self) -> &[f64] {
        &self.b
    }

    pub fn features(&self, image: &[f64]) -> Vec<f64> {
        segment_means(&self.grid, image)
            .iter()
            .zip(&self.original)
            .map(|(m, o)| (m - self.neutral) / (o - self.neutral))
            .collect()
    }

    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for (zi, row) in z.iter().zip(&self.a) {
            for (yc, a) in y.iter_mut().zip(row) {
                *yc += zi * a;
            }
        }
        y
    }
}

impl Predictor<f64> for LinearFeatureModel {
    fn input_shape(&self) -> [usize; 3] {
        self.grid.image_shape()
    }

    fn num_classes(&self) -> usize {
        self.b.len()
    }

    fn predict(&self, batch: &Tensor<f64>) -> Result<Tensor<f64>> {
        let per: usize = self.grid.image_shape().iter().product();
        let n = batch.len() / per;
        let mut out = Vec::with_capacity(n * self.b.len());
        for i in 0..n {
            out.extend(self.eval(&self.features(&batch.data()[i * per..(i + 1) * per])));
        }
        Tensor::new([n, self.b.len()], out)
    }
}

/// Returns the same probability vector for every input.
#[derive(Clone, Debug)]
pub struct ConstantModel {
    pub input_shape: [usize; 3],
    pub probs: Vec<f64>,
}

impl Predictor<f64> for ConstantModel {
    fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    fn num_classes(&self) -> usize {
        self.probs.len()
    }

    fn predict(&self, batch: &Tensor<f64>) -> Result<Tensor<f64>> {
        let n = batch.shape()[0];
        Tensor::new([n, self.probs.len()], self.probs.repeat(n))
    }
}

/// An image whose segments have distinct constant levels, none
/// equal to the image mean.
pub fn staircase_image(grid: &SegmentGrid) -> Tensor<f64> {
    let [c, h, w] = grid.image_shape();
    let n = grid.len();
    let mut data = vec![0.0; c * h * w];
    for (i, r) in grid.segments().iter().enumerate() {
        // interleave low and high levels; the middle level of an odd grid
        // would equal the mean, so it is nudged up
        let k = if i % 2 == 0 { i / 2 } else { n - 1 - i / 2 };
        let nudge = if n % 2 == 1 && 2 * k + 1 == n { 0.3 } else { 0.0 };
        let level = 0.05 + 0.9 * (k as f64 + nudge) / n as f64;
        for ch in 0..c {
            for y in r.top..r.top + r.height {
                let row = ch * h * w + y * w;
                data[row + r.left..row + r.left + r.width].fill(level);
            }
        }
    }
    Tensor::new([c, h, w], data).expect("levels are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{apply_mask, build_grid, FeatureMask};

    #[test]
    fn linear_model_reads_back_masks() {
        let grid = build_grid([1, 16, 16], 8, 8).unwrap();
        let img = staircase_image(&grid);
        let m = LinearFeatureModel::patterned(&grid, &img, 3).unwrap();
        let fill = neutral_value(&img).unwrap();
        let mask = FeatureMask::with_hidden(64, [0, 5, 63]);
        let masked = apply_mask(&img, &grid, &mask, &fill).unwrap();
        let z = m.features(masked.data());
        for (zi, expected) in z.iter().zip(mask.indicator()) {
            assert!((zi - expected).abs() < 1e-12);
        }
        let y = m.predict(&masked.reshape([1, 1, 16, 16]).unwrap()).unwrap();
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(y.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn rejects_coefficients_that_leave_the_simplex() {
        let grid = build_grid([1, 4, 4], 2, 2).unwrap();
        let img = staircase_image(&grid);
        let a = vec![vec![0.6, -0.6]; 4];
        assert!(LinearFeatureModel::new(&grid, &img, a, vec![0.5, 0.5]).is_err());
    }
}
