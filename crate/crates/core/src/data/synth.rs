//! Grayscale geometric shapes at jittered positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitRole};
use crate::error::{Error, Result};
use crate::nd::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// vertical bar
    Bar,
    /// plus sign
    Cross,
    /// filled disk
    Blob,
    /// annulus
    Ring,
    /// filled square
    Square,
    /// main-diagonal stroke
    Diagonal,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Bar,
        ShapeKind::Cross,
        ShapeKind::Blob,
        ShapeKind::Ring,
        ShapeKind::Square,
        ShapeKind::Diagonal,
    ];

    /// Whether the point `(dx, dy)`, in units of `size / 16` from the shape
    /// centre, is covered.
    fn covers(self, dx: f64, dy: f64) -> bool {
        let r = (dx * dx + dy * dy).sqrt();
        match self {
            ShapeKind::Bar => dx.abs() <= 1.0 && dy.abs() <= 4.0,
            ShapeKind::Cross => {
                (dx.abs() <= 0.8 && dy.abs() <= 4.0) || (dy.abs() <= 0.8 && dx.abs() <= 4.0)
            }
            ShapeKind::Blob => r <= 3.2,
            ShapeKind::Ring => (2.4..=4.0).contains(&r),
            ShapeKind::Square => dx.abs() <= 2.6 && dy.abs() <= 2.6,
            ShapeKind::Diagonal => (dx - dy).abs() <= 1.1 && dx.abs() <= 3.6,
        }
    }
}

/// Position jitter of the shape centre, in units of `size / 16`.
const JITTER: f64 = 2.0;

/// Generates `num_per_class` images of each kind, interleaved so that example
/// `i` belongs to class `i % kinds.len()`. Pixels are 1 on the shape and 0
/// elsewhere, plus uniform noise in `[-noise, noise]`, clamped to `[0, 1]`.
pub fn synth_shapes<T: Scalar>(
    num_per_class: usize,
    kinds: &[ShapeKind],
    size: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if size < 8 {
        return Err(Error::invalid("size", format!("{size} < 8")));
    }
    if kinds.len() < 2 || num_per_class == 0 {
        return Err(Error::invalid("kinds", "need at least two classes and one example each"));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::invalid("noise", format!("{noise} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = size as f64 / 16.0;
    let n = num_per_class * kinds.len();
    let mut pixels = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..num_per_class {
        for (label, kind) in kinds.iter().enumerate() {
            let cx = size as f64 / 2.0 + rng.random_range(-JITTER..=JITTER) * unit;
            let cy = size as f64 / 2.0 + rng.random_range(-JITTER..=JITTER) * unit;
            for y in 0..size {
                for x in 0..size {
                    let dx = (x as f64 + 0.5 - cx) / unit;
                    let dy = (y as f64 + 0.5 - cy) / unit;
                    let base = if kind.covers(dx, dy) { 1.0 } else { 0.0 };
                    let jitter = if noise > 0.0 {
                        rng.random_range(-noise..=noise)
                    } else {
                        0.0
                    };
                    pixels.push(T::lit((base + jitter).clamp(0.0, 1.0)));
                }
            }
            labels.push(label);
        }
    }
    let images = Tensor::new(vec![n, 1, size, size], pixels)?;
    Dataset::new(format!("synth_shapes_{size}"), SplitRole::Train, images, labels, kinds.len())
}
