//! LIME-style local linear explanations over the segment feature space.
//!
//! Neighbours keep each segment with probability 1/2; a neighbour with `d`
//! hidden segments gets kernel weight `exp(-d²/σ²)`. The surrogate is a
//! per-class weighted ridge regression with an unpenalized intercept. Kernel
//! weights are normalized to sum to one before the fit, so the ridge strength
//! is relative to the total weight and duplicating the sample set leaves the
//! explanation unchanged.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{apply_mask_into, neutral_value, FeatureMask, SegmentGrid};
use crate::model::Predictor;
use crate::nd::Tensor;

/// Images per forward call while sampling.
const PREDICT_CHUNK: usize = 64;

/// Cholesky pivots smaller than this fraction of the largest count as singular.
const PIVOT_RATIO: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainParams {
    pub samples: usize,
    pub sigma: f64,
    pub ridge_alpha: f64,
    /// Explanations per example for robustness.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ExplainParams {
    fn default() -> Self {
        ExplainParams {
            samples: 1000,
            sigma: 8.0,
            ridge_alpha: 1e-3,
            repeats: 10,
            seed: 0,
        }
    }
}

impl ExplainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma", format!("{} must be positive", self.sigma)));
        }
        if !(self.ridge_alpha >= 0.0 && self.ridge_alpha.is_finite()) {
            return Err(Error::invalid("ridge_alpha", format!("{} must be >= 0", self.ridge_alpha)));
        }
        if self.repeats < 2 {
            return Err(Error::invalid("repeats", "need at least two explanations per example"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodSample {
    pub z: FeatureMask,
    pub y: Vec<f64>,
    pub w: f64,
}

/// `exp(-d²/σ²)` for `d` hidden segments.
pub fn kernel_weight(hidden: usize, sigma: f64) -> f64 {
    let d = hidden as f64;
    (-(d * d) / (sigma * sigma)).exp()
}

/// `g(z) = zᵀA + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    /// One row per feature, one column per class.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Surrogate {
    pub fn num_features(&self) -> usize {
        self.a.len()
    }

    pub fn num_classes(&self) -> usize {
        self.b.len()
    }

    pub fn predict(&self, z: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for (&zi, row) in z.iter().zip(&self.a) {
            if zi != 0.0 {
                for (yc, a) in y.iter_mut().zip(row) {
                    *yc += zi * a;
                }
            }
        }
        y
    }

    pub fn predict_mask(&self, mask: &FeatureMask) -> Vec<f64> {
        self.predict(&mask.indicator())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    #[serde(flatten)]
    pub surrogate: Surrogate,
    pub grid: SegmentGrid,
    pub sample_count: usize,
    pub sigma: f64,
    pub ridge_alpha: f64,
    pub seed: u64,
    pub stream: u64,
}

impl Explanation {
    pub fn a(&self) -> &[Vec<f64>] {
        &self.surrogate.a
    }

    pub fn b(&self) -> &[f64] {
        &self.surrogate.b
    }

    pub fn g(&self, z: &[f64]) -> Vec<f64> {
        self.surrogate.predict(z)
    }
}

/// Keeps each of `num_features` segments independently with probability 1/2.
pub fn random_mask<R: Rng + ?Sized>(num_features: usize, rng: &mut R) -> FeatureMask {
    FeatureMask::new((0..num_features).map(|_| rng.random_bool(0.5)).collect())
}

/// Model probabilities for `image` under each mask, hidden segments filled
/// with the image's neutral value. Rows come back in mask order.
pub fn predict_masked<P: Predictor<f64> + ?Sized>(
    model: &P,
    image: &Tensor<f64>,
    grid: &SegmentGrid,
    masks: &[FeatureMask],
) -> Result<Vec<Vec<f64>>> {
    if image.shape() != grid.image_shape() || model.input_shape() != grid.image_shape() {
        return Err(Error::ShapeMismatch {
            op: "predict_masked",
            left: image.shape().to_vec(),
            right: grid.image_shape().to_vec(),
        });
    }
    if let Some(bad) = masks.iter().find(|m| m.len() != grid.len()) {
        return Err(Error::invalid(
            "mask",
            format!("{} entries for a grid of {} segments", bad.len(), grid.len()),
        ));
    }
    let fill = neutral_value(image)?;
    let per = image.len();
    let [c, h, w] = grid.image_shape();
    let k = model.num_classes();
    let chunks = masks
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| {
            let mut data = vec![0.0; chunk.len() * per];
            for (dst, mask) in data.chunks_mut(per).zip(chunk) {
                apply_mask_into(image.data(), dst, grid, mask, &fill);
            }
            let probs = model.predict(&Tensor::new([chunk.len(), c, h, w], data)?)?;
            if probs.shape() != [chunk.len(), k] {
                return Err(Error::ShapeMismatch {
                    op: "predict_masked",
                    left: probs.shape().to_vec(),
                    right: vec![chunk.len(), k],
                });
            }
            Ok(probs.data().chunks(k).map(<[f64]>::to_vec).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn sample_neighborhood<P: Predictor<f64> + ?Sized, R: Rng + ?Sized>(
    model: &P,
    image: &Tensor<f64>,
    grid: &SegmentGrid,
    n: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<NeighborhoodSample>> {
    if n < grid.len() + 2 {
        return Err(Error::invalid(
            "samples",
            format!("{n} samples underdetermine a regression on {} features", grid.len()),
        ));
    }
    let masks: Vec<FeatureMask> = (0..n).map(|_| random_mask(grid.len(), rng)).collect();
    let ys = predict_masked(model, image, grid, &masks)?;
    Ok(masks
        .into_iter()
        .zip(ys)
        .map(|(z, y)| {
            let w = kernel_weight(z.hidden_count(), sigma);
            NeighborhoodSample { z, y, w }
        })
        .collect())
}

/// Per-class weighted ridge regression, solved through the normal equations
/// of the design matrix augmented with an unpenalized intercept column.
pub fn fit_lle(samples: &[NeighborhoodSample], ridge_alpha: f64) -> Result<Surrogate> {
    let Some(first) = samples.first() else {
        return Err(Error::invalid("samples", "empty neighbourhood"));
    };
    let (f, k) = (first.z.len(), first.y.len());
    if samples.len() < f + 2 {
        return Err(Error::invalid(
            "samples",
            format!("{} samples underdetermine a regression on {f} features", samples.len()),
        ));
    }
    if samples.iter().any(|s| s.z.len() != f || s.y.len() != k) {
        return Err(Error::invalid("samples", "mixed feature or class counts"));
    }
    let total: f64 = samples.iter().map(|s| s.w).sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::invalid("samples", "total kernel weight must be positive"));
    }
    let dim = f + 1;
    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DMatrix::<f64>::zeros(dim, k);
    let mut active = Vec::with_capacity(dim);
    for s in samples {
        let w = s.w / total;
        active.clear();
        active.extend(s.z.kept().iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i));
        active.push(f);
        for (ii, &i) in active.iter().enumerate() {
            for &j in &active[ii..] {
                gram[(i, j)] += w;
            }
            for (c, &y) in s.y.iter().enumerate() {
                rhs[(i, c)] += w * y;
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    for i in 0..f {
        gram[(i, i)] += ridge_alpha;
    }
    let chol = gram.cholesky().ok_or_else(|| Error::Singular {
        detail: "normal matrix is not positive definite".into(),
    })?;
    let diag: DVector<f64> = chol.l_dirty().diagonal();
    let (lo, hi) = (diag.min(), diag.max());
    if !(lo > PIVOT_RATIO * hi) {
        return Err(Error::Singular {
            detail: format!("pivot ratio {:.3e}", lo / hi),
        });
    }
    let coef = chol.solve(&rhs);
    Ok(Surrogate {
        a: (0..f).map(|i| coef.row(i).iter().copied().collect()).collect(),
        b: coef.row(f).iter().copied().collect(),
    })
}

/// The rng for explanation `stream` of the example with base `seed`.
pub fn explanation_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn explain_stream<P: Predictor<f64> + ?Sized>(
    model: &P,
    image: &Tensor<f64>,
    grid: &SegmentGrid,
    params: &ExplainParams,
    stream: u64,
) -> Result<Explanation> {
    let mut rng = explanation_rng(params.seed, stream);
    let samples = sample_neighborhood(model, image, grid, params.samples, params.sigma, &mut rng)?;
    Ok(Explanation {
        surrogate: fit_lle(&samples, params.ridge_alpha)?,
        grid: grid.clone(),
        sample_count: params.samples,
        sigma: params.sigma,
        ridge_alpha: params.ridge_alpha,
        seed: params.seed,
        stream,
    })
}

/// The first explanation of [`repeat_explanations`].
pub fn explain<P: Predictor<f64> + ?Sized>(
    model: &P,
    image: &Tensor<f64>,
    grid: &SegmentGrid,
    params: &ExplainParams,
) -> Result<Explanation> {
    explain_stream(model, image, grid, params, 0)
}

/// `k` explanations on streams `0..k` of the base seed.
pub fn repeat_explanations<P: Predictor<f64> + ?Sized>(
    model: &P,
    image: &Tensor<f64>,
    grid: &SegmentGrid,
    params: &ExplainParams,
    k: usize,
) -> Result<Vec<Explanation>> {
    if k < 2 {
        return Err(Error::invalid("k", "need at least two explanations"));
    }
    (0..k as u64)
        .map(|s| explain_stream(model, image, grid, params, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{staircase_image, ConstantModel, LinearFeatureModel};
    use crate::masking::build_grid;

    fn setup(rows: usize) -> (SegmentGrid, Tensor<f64>, LinearFeatureModel) {
        let grid = build_grid([1, 16, 16], rows, rows).unwrap();
        let img = staircase_image(&grid);
        let model = LinearFeatureModel::patterned(&grid, &img, 3).unwrap();
        (grid, img, model)
    }

    fn max_coef_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn kernel_weight_examples() {
        assert_eq!(kernel_weight(0, 8.0), 1.0);
        assert!((kernel_weight(8, 8.0) - (-1f64).exp()).abs() < 1e-15);
        assert!((1..64).all(|d| kernel_weight(d, 8.0) < kernel_weight(d - 1, 8.0)));
    }

    #[test]
    fn full_mask_sample_is_the_original_prediction() {
        let (grid, img, model) = setup(8);
        let ys = predict_masked(&model, &img, &grid, &[FeatureMask::all_kept(64)]).unwrap();
        let direct = model.predict(&img.reshape([1, 1, 16, 16]).unwrap()).unwrap();
        assert_eq!(ys[0], direct.data());
    }

    #[test]
    fn neighborhood_hidden_counts_are_binomial() {
        let (grid, img, model) = setup(8);
        let mut rng = explanation_rng(5, 0);
        let s = sample_neighborhood(&model, &img, &grid, 10_000, 8.0, &mut rng).unwrap();
        let mean = s.iter().map(|x| x.z.hidden_count() as f64).sum::<f64>() / 10_000.0;
        // sd of the mean of 10k Binomial(64, 1/2) draws is 4 / 100
        assert!((mean - 32.0).abs() < 5.0 * 0.04, "{mean}");
        assert!(s.iter().all(|x| x.w > 0.0 && x.w <= 1.0));
        for x in &s[..50] {
            assert_eq!(x.w, kernel_weight(x.z.hidden_count(), 8.0));
            assert!((x.y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let (grid, img, model) = setup(8);
        let mut rng = explanation_rng(0, 0);
        assert!(matches!(
            sample_neighborhood(&model, &img, &grid, 65, 8.0, &mut rng),
            Err(Error::InvalidArgument { .. })
        ));
    }

    #[test]
    fn exactly_linear_samples_are_recovered() {
        // samples built directly from y = zᵀA* + b*
        let mut rng = explanation_rng(1, 0);
        let (f, k) = (10, 3);
        let a_star: Vec<Vec<f64>> = (0..f)
            .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let b_star = vec![0.2, -0.1, 0.5];
        let truth = Surrogate { a: a_star.clone(), b: b_star.clone() };
        let samples: Vec<_> = (0..200)
            .map(|_| {
                let z = random_mask(f, &mut rng);
                let y = truth.predict_mask(&z);
                let w = kernel_weight(z.hidden_count(), 3.0);
                NeighborhoodSample { z, y, w }
            })
            .collect();
        let fit = fit_lle(&samples, 1e-10).unwrap();
        assert!(max_coef_err(&fit.a, &a_star) < 1e-6);
        assert!(max_coef_err(&[fit.b], &[b_star]) < 1e-6);
    }

    #[test]
    fn constant_outputs_give_zero_importance() {
        let grid = build_grid([1, 16, 16], 8, 8).unwrap();
        let img = staircase_image(&grid);
        let model = ConstantModel {
            input_shape: [1, 16, 16],
            probs: vec![0.3, 0.7],
        };
        let e = explain(&model, &img, &grid, &ExplainParams::default()).unwrap();
        assert!(e.a().iter().flatten().all(|v| v.abs() < 1e-8));
        let mut rng = explanation_rng(3, 0);
        for _ in 0..20 {
            let g = e.g(&random_mask(64, &mut rng).indicator());
            assert!((g[0] - 0.3).abs() < 1e-8 && (g[1] - 0.7).abs() < 1e-8);
        }
    }

    #[test]
    fn duplicated_samples_give_the_same_fit() {
        let (grid, img, model) = setup(4);
        let mut rng = explanation_rng(2, 0);
        let s = sample_neighborhood(&model, &img, &grid, 100, 4.0, &mut rng).unwrap();
        let doubled: Vec<_> = s.iter().chain(&s).cloned().collect();
        let a = fit_lle(&s, 1e-3).unwrap();
        let b = fit_lle(&doubled, 1e-3).unwrap();
        assert!(max_coef_err(&a.a, &b.a) < 1e-12);
        assert!(max_coef_err(&[a.b], &[b.b]) < 1e-12);
    }

    #[test]
    fn degenerate_design_without_ridge_is_singular() {
        let s: Vec<_> = (0..20)
            .map(|_| NeighborhoodSample {
                z: FeatureMask::with_hidden(4, [1]),
                y: vec![0.5, 0.5],
                w: 1.0,
            })
            .collect();
        assert!(matches!(fit_lle(&s, 0.0), Err(Error::Singular { .. })));
        assert!(fit_lle(&s, 1e-3).is_ok());
    }

    #[test]
    fn linear_black_box_is_recovered_through_images() {
        let (grid, img, model) = setup(8);
        let params = ExplainParams {
            ridge_alpha: 1e-10,
            ..ExplainParams::default()
        };
        let e = explain(&model, &img, &grid, &params).unwrap();
        assert_eq!(e.a().len(), 64);
        assert!(max_coef_err(e.a(), model.coefficients()) < 1e-4);
        let again = explain(&model, &img, &grid, &params).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn repeats_use_distinct_streams_and_agree_on_linear_models() {
        let (grid, img, model) = setup(8);
        let params = ExplainParams {
            ridge_alpha: 1e-10,
            ..ExplainParams::default()
        };
        let es = repeat_explanations(&model, &img, &grid, &params, 5).unwrap();
        assert_eq!(es.len(), 5);
        assert_eq!(es[0], explain(&model, &img, &grid, &params).unwrap());
        assert_ne!(es[0].a(), es[1].a());
        for x in &es {
            for y in &es {
                assert!(max_coef_err(x.a(), y.a()) < 1e-3);
            }
        }
        let same = explain_stream(&model, &img, &grid, &params, 3).unwrap();
        assert_eq!(same, es[3]);
        assert!(repeat_explanations(&model, &img, &grid, &params, 1).is_err());
    }

    #[test]
    fn explanation_json_round_trips() {
        let (grid, img, model) = setup(4);
        let params = ExplainParams {
            samples: 50,
            ..ExplainParams::default()
        };
        let e = explain(&model, &img, &grid, &params).unwrap();
        let json = serde_json::to_string(&e).unwrap();
        assert!(json.contains("\"a\":[[") && json.contains("\"rows\":4"));
        assert_eq!(serde_json::from_str::<Explanation>(&json).unwrap(), e);
    }
}
