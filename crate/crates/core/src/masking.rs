//! Square-segment feature space over images, mean-colour hiding and random
//! selection of the segments to hide.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// A `rows × cols` tiling of a `(c, h, w)` image. Segments are numbered
/// row-major. The last row and column absorb any remainder pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct SegmentGrid {
    image_shape: [usize; 3],
    rows: usize,
    cols: usize,
    segments: Vec<Rect>,
}

/// Serialized form of a [`SegmentGrid`]; segments are rebuilt on load.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub image_shape: [usize; 3],
    pub rows: usize,
    pub cols: usize,
}

impl TryFrom<GridSpec> for SegmentGrid {
    type Error = Error;

    fn try_from(spec: GridSpec) -> Result<Self> {
        SegmentGrid::new(spec.image_shape, spec.rows, spec.cols)
    }
}

impl From<SegmentGrid> for GridSpec {
    fn from(grid: SegmentGrid) -> Self {
        GridSpec {
            image_shape: grid.image_shape,
            rows: grid.rows,
            cols: grid.cols,
        }
    }
}

fn spans(total: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = total / parts;
    (0..parts)
        .map(|i| {
            let len = if i + 1 == parts { total - base * (parts - 1) } else { base };
            (i * base, len)
        })
        .collect()
}

impl SegmentGrid {
    pub fn new(image_shape: [usize; 3], rows: usize, cols: usize) -> Result<Self> {
        let [c, h, w] = image_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("image_shape", format!("{image_shape:?}")));
        }
        if rows == 0 || cols == 0 || rows > h || cols > w {
            return Err(Error::invalid(
                "grid",
                format!("{rows}×{cols} grid does not fit a {h}×{w} image"),
            ));
        }
        let mut segments = Vec::with_capacity(rows * cols);
        for &(top, height) in &spans(h, rows) {
            for &(left, width) in &spans(w, cols) {
                segments.push(Rect {
                    top,
                    left,
                    height,
                    width,
                });
            }
        }
        Ok(SegmentGrid {
            image_shape,
            rows,
            cols,
            segments,
        })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[Rect] {
        &self.segments
    }

    fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }
}

/// Visibility of each segment; `true` means the segment is kept.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask {
    kept: Vec<bool>,
}

impl FeatureMask {
    pub fn new(kept: Vec<bool>) -> Self {
        FeatureMask { kept }
    }

    pub fn all_kept(n: usize) -> Self {
        FeatureMask { kept: vec![true; n] }
    }

    pub fn all_hidden(n: usize) -> Self {
        FeatureMask { kept: vec![false; n] }
    }

    pub fn with_hidden(n: usize, hidden: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::all_kept(n);
        for i in hidden {
            m.kept[i] = false;
        }
        m
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn hidden_count(&self) -> usize {
        self.kept.iter().filter(|k| !**k).count()
    }

    pub fn hide(&mut self, i: usize) {
        self.kept[i] = false;
    }

    /// Binary feature vector: 1 for kept, 0 for hidden.
    pub fn indicator(&self) -> Vec<f64> {
        self.kept.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }
}

/// Same as [`SegmentGrid::new`].
pub fn build_grid(image_shape: [usize; 3], rows: usize, cols: usize) -> Result<SegmentGrid> {
    SegmentGrid::new(image_shape, rows, cols)
}

/// Per-channel mean of a `(c, h, w)` image stored row-major in `pixels`.
pub fn channel_means<T: Scalar>(pixels: &[T], channels: usize) -> Vec<T> {
    let plane = pixels.len() / channels;
    let inv = T::lit(1.0 / plane as f64);
    pixels
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect()
}

/// Neutral fill colour: the per-channel mean over the whole image.
pub fn neutral_value<T: Scalar>(image: &Tensor<T>) -> Result<Vec<T>> {
    if image.ndim() != 3 {
        return Err(Error::ShapeMismatch {
            op: "neutral_value",
            left: image.shape().to_vec(),
            right: vec![0, 0, 0],
        });
    }
    Ok(channel_means(image.data(), image.shape()[0]))
}

/// Number of segments hidden at `lambda_pct` percent: half-up rounding, but at
/// least one whenever `lambda_pct > 0`.
pub fn hidden_count(num_segments: usize, lambda_pct: f64) -> Result<usize> {
    if !(0.0..=100.0).contains(&lambda_pct) {
        return Err(Error::invalid("lambda_pct", format!("{lambda_pct} outside [0, 100]")));
    }
    let k = (lambda_pct / 100.0 * num_segments as f64 + 0.5).floor() as usize;
    Ok(if lambda_pct > 0.0 && k == 0 {
        1.min(num_segments)
    } else {
        k.min(num_segments)
    })
}

/// Draws the hidden segments uniformly without replacement.
pub fn select_hidden<R: Rng + ?Sized>(num_segments: usize, lambda_pct: f64, rng: &mut R) -> Result<FeatureMask> {
    let k = hidden_count(num_segments, lambda_pct)?;
    if k == 0 {
        return Ok(FeatureMask::all_kept(num_segments));
    }
    Ok(FeatureMask::with_hidden(num_segments, index::sample(rng, num_segments, k)))
}

/// Writes `src` with hidden segments filled by `fill` into `dst`. Both hold one
/// `(c, h, w)` image.
pub fn apply_mask_into<T: Scalar>(src: &[T], dst: &mut [T], grid: &SegmentGrid, mask: &FeatureMask, fill: &[T]) {
    let [c, h, w] = grid.image_shape;
    dst.copy_from_slice(src);
    for (rect, _) in grid.segments.iter().zip(&mask.kept).filter(|(_, k)| !**k) {
        for (ch, &colour) in fill.iter().enumerate().take(c) {
            for y in rect.top..rect.top + rect.height {
                let row = ch * h * w + y * w;
                dst[row + rect.left..row + rect.left + rect.width].fill(colour);
            }
        }
    }
}

/// Copy of `image` with every hidden segment replaced channel-wise by `fill`.
pub fn apply_mask<T: Scalar>(image: &Tensor<T>, grid: &SegmentGrid, mask: &FeatureMask, fill: &[T]) -> Result<Tensor<T>> {
    if image.shape() != grid.image_shape {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            left: image.shape().to_vec(),
            right: grid.image_shape.to_vec(),
        });
    }
    check_mask(grid, mask, fill)?;
    let mut out = vec![T::zero(); grid.image_len()];
    apply_mask_into(image.data(), &mut out, grid, mask, fill);
    Ok(Tensor::from_raw(image.shape().to_vec(), out))
}

pub(crate) fn check_mask<T>(grid: &SegmentGrid, mask: &FeatureMask, fill: &[T]) -> Result<()> {
    if mask.len() != grid.len() {
        return Err(Error::invalid(
            "mask",
            format!("{} entries for a grid of {} segments", mask.len(), grid.len()),
        ));
    }
    if fill.len() != grid.image_shape[0] {
        return Err(Error::invalid(
            "fill",
            format!("{} channels for a {}-channel image", fill.len(), grid.image_shape[0]),
        ));
    }
    Ok(())
}

/// Masks every image of a `[b, c, h, w]` batch with its own mask, filling with
/// that image's own neutral value.
pub fn mask_batch<T: Scalar>(batch: &Tensor<T>, grid: &SegmentGrid, masks: &[FeatureMask]) -> Result<Tensor<T>> {
    if batch.ndim() != 4 || batch.shape()[1..] != grid.image_shape || batch.shape()[0] != masks.len() {
        return Err(Error::ShapeMismatch {
            op: "mask_batch",
            left: batch.shape().to_vec(),
            right: vec![masks.len(), grid.image_shape[0], grid.image_shape[1], grid.image_shape[2]],
        });
    }
    let per = grid.image_len();
    let c = grid.image_shape[0];
    let mut out = vec![T::zero(); batch.len()];
    for (i, mask) in masks.iter().enumerate() {
        let src = &batch.data()[i * per..(i + 1) * per];
        let fill = channel_means(src, c);
        check_mask(grid, mask, &fill)?;
        apply_mask_into(src, &mut out[i * per..(i + 1) * per], grid, mask, &fill);
    }
    Ok(Tensor::from_raw(batch.shape().to_vec(), out))
}
