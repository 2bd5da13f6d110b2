//! Explanation-quality metrics, each in `[0, 1]`.
//!
//! `agreement(u, v) = 1 - ‖u - v‖₂ / √2`, clamped to `[0, 1]`; √2 bounds the
//! distance between two probability vectors. `g` is the surrogate and `f`
//! the model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{predict_masked, random_mask, repeat_explanations, ExplainParams, Explanation, Surrogate};
use crate::masking::{FeatureMask, SegmentGrid};
use crate::model::Predictor;
use crate::nd::Tensor;

pub fn agreement(u: &[f64], v: &[f64]) -> f64 {
    let d = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    (1.0 - d / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn runner_up(v: &[f64], top: usize) -> usize {
    let mut best = usize::from(top == 0);
    for (i, &x) in v.iter().enumerate() {
        if i != top && x > v[best] {
            best = i;
        }
    }
    best
}

/// Agreement of surrogate and model at the unmasked example.
pub fn local_concordance<P: Predictor<f64> + ?Sized>(expl: &Explanation, model: &P, image: &Tensor<f64>) -> Result<f64> {
    let full = FeatureMask::all_kept(expl.grid.len());
    let f = predict_masked(model, image, &expl.grid, std::slice::from_ref(&full))?;
    Ok(agreement(&expl.surrogate.predict_mask(&full), &f[0]))
}

/// Mean agreement over `m` fresh masks that keep each segment with
/// probability 1/2.
pub fn local_fidelity<P: Predictor<f64> + ?Sized, R: Rng + ?Sized>(
    expl: &Explanation,
    model: &P,
    image: &Tensor<f64>,
    grid: &SegmentGrid,
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::invalid("m", "need at least one neighbour"));
    }
    let masks: Vec<FeatureMask> = (0..m).map(|_| random_mask(grid.len(), rng)).collect();
    let ys = predict_masked(model, image, grid, &masks)?;
    let total: f64 = masks
        .iter()
        .zip(&ys)
        .map(|(z, y)| agreement(&expl.surrogate.predict_mask(z), y))
        .sum();
    Ok(total / m as f64)
}

/// Greedy search for a mask that changes the surrogate's predicted class:
/// hides features in decreasing order of `A[i, c] - A[i, c₂]`, where `c` and
/// `c₂` are the surrogate's top two classes at the full mask. `None` when
/// hiding everything does not flip.
pub fn greedy_flip_mask(surrogate: &Surrogate) -> Option<FeatureMask> {
    let n = surrogate.num_features();
    let mut z = FeatureMask::all_kept(n);
    let g = surrogate.predict_mask(&z);
    if g.len() < 2 {
        return None;
    }
    let c = argmax(&g);
    let c2 = runner_up(&g, c);
    let mut order: Vec<usize> = (0..n).collect();
    let margin = |i: usize| surrogate.a[i][c] - surrogate.a[i][c2];
    order.sort_by(|&i, &j| margin(j).total_cmp(&margin(i)).then(i.cmp(&j)));
    for i in order {
        z.hide(i);
        if argmax(&surrogate.predict_mask(&z)) != c {
            return Some(z);
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prescriptivity {
    pub value: f64,
    /// Mask at which the surrogate's class changed, if any.
    pub flip_mask: Option<FeatureMask>,
}

/// Agreement of surrogate and model at the greedy flip mask; 0 when no flip
/// exists.
pub fn prescriptivity<P: Predictor<f64> + ?Sized>(
    expl: &Explanation,
    model: &P,
    image: &Tensor<f64>,
    grid: &SegmentGrid,
) -> Result<Prescriptivity> {
    let Some(z) = greedy_flip_mask(&expl.surrogate) else {
        return Ok(Prescriptivity {
            value: 0.0,
            flip_mask: None,
        });
    };
    let f = predict_masked(model, image, grid, std::slice::from_ref(&z))?;
    Ok(Prescriptivity {
        value: agreement(&expl.surrogate.predict_mask(&z), &f[0]),
        flip_mask: Some(z),
    })
}

/// `(n - Σ ĩ) / (n - 1)` with `ĩ` the row norms of `A` over their maximum;
/// 0 for an all-zero `A`.
pub fn conciseness(expl: &Explanation) -> Result<f64> {
    surrogate_conciseness(&expl.surrogate)
}

pub fn surrogate_conciseness(s: &Surrogate) -> Result<f64> {
    let n = s.num_features();
    if n < 2 {
        return Err(Error::invalid("explanation", "conciseness needs at least two features"));
    }
    let norms: Vec<f64> = s.a.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(0.0);
    }
    let total: f64 = norms.iter().map(|v| v / max).sum();
    Ok(((n as f64 - total) / (n as f64 - 1.0)).clamp(0.0, 1.0))
}

fn cosine(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().flatten().zip(y.iter().flatten()) {
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    dot / (nx.sqrt() * ny.sqrt())
}

/// Mean over unordered pairs of `max(0, cos(A_i, A_j))`. Pair terms are
/// summed in sorted order, so the result does not depend on list order.
pub fn robustness(expls: &[Explanation]) -> Result<f64> {
    let mats: Vec<&[Vec<f64>]> = expls.iter().map(|e| e.a()).collect();
    matrix_robustness(&mats)
}

pub fn matrix_robustness(mats: &[&[Vec<f64>]]) -> Result<f64> {
    if mats.len() < 2 {
        return Err(Error::invalid("explanations", "robustness needs at least two"));
    }
    let mut terms = Vec::with_capacity(mats.len() * (mats.len() - 1) / 2);
    for i in 0..mats.len() {
        for j in i + 1..mats.len() {
            terms.push(cosine(mats[i], mats[j]).max(0.0));
        }
    }
    terms.sort_by(f64::total_cmp);
    Ok((terms.iter().sum::<f64>() / terms.len() as f64).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricParams {
    #[serde(flatten)]
    pub explain: ExplainParams,
    /// Neighbours for local fidelity.
    pub fidelity_samples: usize,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            explain: ExplainParams::default(),
            fidelity_samples: 100,
        }
    }
}

/// Stream of the explanation seed reserved for local fidelity; explanation
/// streams count up from 0.
pub const FIDELITY_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub example_id: usize,
    pub local_concordance: f64,
    pub local_fidelity: f64,
    pub prescriptivity: f64,
    pub conciseness: f64,
    pub robustness: f64,
    /// False when no mask changed the surrogate's class.
    pub prescriptivity_flipped: bool,
    pub seed: u64,
    pub samples: usize,
    pub repeats: usize,
    pub fidelity_samples: usize,
}

impl MetricReport {
    pub const METRICS: [&'static str; 5] = [
        "local_concordance",
        "local_fidelity",
        "prescriptivity",
        "conciseness",
        "robustness",
    ];

    pub fn values(&self) -> [f64; 5] {
        [
            self.local_concordance,
            self.local_fidelity,
            self.prescriptivity,
            self.conciseness,
            self.robustness,
        ]
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        Self::METRICS.iter().position(|m| *m == name).map(|i| self.values()[i])
    }
}

/// Robustness over `params.explain.repeats` explanations; the other four
/// metrics on the first of them.
pub fn report<P: Predictor<f64> + ?Sized>(
    model: &P,
    image: &Tensor<f64>,
    grid: &SegmentGrid,
    params: &MetricParams,
    example_id: usize,
) -> Result<MetricReport> {
    params.explain.validate()?;
    let expls = repeat_explanations(model, image, grid, &params.explain, params.explain.repeats)?;
    let first = &expls[0];
    let mut rng = ChaCha8Rng::seed_from_u64(params.explain.seed);
    rng.set_stream(FIDELITY_STREAM);
    let presc = prescriptivity(first, model, image, grid)?;
    Ok(MetricReport {
        example_id,
        local_concordance: local_concordance(first, model, image)?,
        local_fidelity: local_fidelity(first, model, image, grid, params.fidelity_samples, &mut rng)?,
        prescriptivity: presc.value,
        conciseness: conciseness(first)?,
        robustness: robustness(&expls)?,
        prescriptivity_flipped: presc.flip_mask.is_some(),
        seed: params.explain.seed,
        samples: params.explain.samples,
        repeats: params.explain.repeats,
        fidelity_samples: params.fidelity_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::explain;
    use crate::fixtures::{staircase_image, ConstantModel, LinearFeatureModel};
    use crate::masking::build_grid;
    use proptest::prelude::*;
    use rand::Rng;

    fn expl(a: Vec<Vec<f64>>, b: Vec<f64>, grid: &SegmentGrid) -> Explanation {
        Explanation {
            surrogate: Surrogate { a, b },
            grid: grid.clone(),
            sample_count: 0,
            sigma: 8.0,
            ridge_alpha: 0.0,
            seed: 0,
            stream: 0,
        }
    }

    fn linear_setup() -> (SegmentGrid, Tensor<f64>, LinearFeatureModel) {
        let grid = build_grid([1, 16, 16], 8, 8).unwrap();
        let img = staircase_image(&grid);
        let model = LinearFeatureModel::patterned(&grid, &img, 3).unwrap();
        (grid, img, model)
    }

    fn oracle_params() -> MetricParams {
        MetricParams {
            explain: ExplainParams {
                ridge_alpha: 1e-10,
                ..ExplainParams::default()
            },
            ..MetricParams::default()
        }
    }

    #[test]
    fn agreement_closed_forms() {
        assert_eq!(agreement(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(agreement(&[0.3, 0.7], &[0.3, 0.7]), 1.0);
        // shift by 0.1·√2 in L2: (0.1, -0.1) has norm 0.1·√2
        assert!((agreement(&[0.5, 0.5], &[0.6, 0.4]) - 0.9).abs() < 1e-12);
        assert_eq!(agreement(&[2.0, 0.0], &[0.0, 2.0]), 0.0);
    }

    #[test]
    fn concordance_closed_forms() {
        let grid = build_grid([1, 4, 4], 2, 2).unwrap();
        let img = staircase_image(&grid);
        let model = ConstantModel {
            input_shape: [1, 4, 4],
            probs: vec![1.0, 0.0],
        };
        let far = expl(vec![vec![0.0; 2]; 4], vec![0.0, 1.0], &grid);
        assert_eq!(local_concordance(&far, &model, &img).unwrap(), 0.0);
        let near = expl(vec![vec![0.0; 2]; 4], vec![0.9, 0.1], &grid);
        assert!((local_concordance(&near, &model, &img).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn fidelity_of_centroid_surrogate_against_one_hot_model() {
        let grid = build_grid([1, 4, 4], 2, 2).unwrap();
        let img = staircase_image(&grid);
        let model = ConstantModel {
            input_shape: [1, 4, 4],
            probs: vec![0.0, 1.0],
        };
        let e = expl(vec![vec![0.0; 2]; 4], vec![0.5, 0.5], &grid);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = local_fidelity(&e, &model, &img, &grid, 100, &mut rng).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn linear_black_box_scores_perfectly() {
        let (grid, img, model) = linear_setup();
        let r = report(&model, &img, &grid, &oracle_params(), 0).unwrap();
        assert!(r.local_concordance >= 0.999 && (r.local_concordance - 1.0).abs() < 1e-6, "{r:?}");
        assert!(r.local_fidelity >= 0.999, "{r:?}");
        assert!(r.robustness >= 0.999, "{r:?}");
        assert!(r.prescriptivity_flipped);
        assert!((r.prescriptivity - 1.0).abs() < 1e-4, "{r:?}");
        assert_eq!(report(&model, &img, &grid, &oracle_params(), 0).unwrap(), r);
    }

    #[test]
    fn constant_model_is_degenerate() {
        let grid = build_grid([1, 16, 16], 8, 8).unwrap();
        let img = staircase_image(&grid);
        let model = ConstantModel {
            input_shape: [1, 16, 16],
            probs: vec![0.2, 0.8],
        };
        let params = MetricParams {
            explain: ExplainParams {
                samples: 200,
                repeats: 3,
                ..ExplainParams::default()
            },
            fidelity_samples: 20,
        };
        let e = explain(&model, &img, &grid, &params.explain).unwrap();
        // fitted A is round-off sized, not exactly zero; zero it to test the
        // degenerate branches
        let zeroed = expl(vec![vec![0.0; 2]; 64], e.b().to_vec(), &grid);
        assert_eq!(conciseness(&zeroed).unwrap(), 0.0);
        let p = prescriptivity(&zeroed, &model, &img, &grid).unwrap();
        assert_eq!(p.value, 0.0);
        assert!(p.flip_mask.is_none());
        let r = report(&model, &img, &grid, &params, 1).unwrap();
        assert!(!r.prescriptivity_flipped && r.prescriptivity == 0.0, "{r:?}");
    }

    #[test]
    fn two_feature_flip_matches_exhaustive_search() {
        // g(1, 1) = (0.65, 0.35); hiding feature 0 alone gives (0.45, 0.55),
        // hiding feature 1 alone gives (0.6, 0.4)
        let s = Surrogate {
            a: vec![vec![0.2, -0.2], vec![0.05, -0.05]],
            b: vec![0.4, 0.6],
        };
        assert_eq!(exhaustive_min_flip(&s), Some(1));
        let z = greedy_flip_mask(&s).unwrap();
        assert_eq!(z.kept(), &[false, true]);
    }

    #[test]
    fn conciseness_closed_forms() {
        let grid = build_grid([1, 4, 4], 2, 2).unwrap();
        let one_hot = expl(
            vec![vec![0.0, 0.0], vec![0.3, -0.4], vec![0.0, 0.0], vec![0.0, 0.0]],
            vec![0.5; 2],
            &grid,
        );
        assert_eq!(conciseness(&one_hot).unwrap(), 1.0);
        let uniform = expl(vec![vec![0.1, -0.1]; 4], vec![0.5; 2], &grid);
        assert_eq!(conciseness(&uniform).unwrap(), 0.0);
        let mixed = expl(
            vec![vec![1.0, 0.0], vec![0.5, 0.0], vec![0.0, -0.5], vec![0.0, 0.0]],
            vec![0.5; 2],
            &grid,
        );
        assert!((conciseness(&mixed).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn robustness_closed_forms() {
        let grid = build_grid([1, 4, 4], 2, 2).unwrap();
        let a = vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]];
        let neg: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        let e = |m: &Vec<Vec<f64>>| expl(m.clone(), vec![0.5; 2], &grid);
        assert_eq!(robustness(&[e(&a), e(&a)]).unwrap(), 1.0);
        assert_eq!(robustness(&[e(&a), e(&neg)]).unwrap(), 0.0);
        // pairs (a, a), (a, y), (a, y) with y at 60 degrees: cosines 1, 1/2, 1/2
        let y = vec![vec![0.5, 3f64.sqrt() / 2.0], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]];
        let v = robustness(&[e(&a), e(&a), e(&y)]).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        let zero = vec![vec![0.0; 2]; 4];
        assert_eq!(robustness(&[e(&zero), e(&zero)]).unwrap(), 0.0);
        assert!(robustness(&[e(&a)]).is_err());
    }

    fn matrix(f: usize, k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, k), f)
    }

    /// Smallest number of hidden features that flips the surrogate's class.
    fn exhaustive_min_flip(s: &Surrogate) -> Option<usize> {
        let n = s.num_features();
        let c = argmax(&s.predict(&vec![1.0; n]));
        (0u32..1 << n)
            .filter(|bits| {
                let z: Vec<f64> = (0..n).map(|i| if bits >> i & 1 == 1 { 0.0 } else { 1.0 }).collect();
                argmax(&s.predict(&z)) != c
            })
            .map(|bits| bits.count_ones() as usize)
            .min()
    }

    proptest! {
        #[test]
        fn conciseness_is_scale_invariant(a in matrix(6, 3)) {
            let grid = build_grid([1, 6, 6], 2, 3).unwrap();
            let base = conciseness(&expl(a.clone(), vec![0.0; 3], &grid)).unwrap();
            // powers of two scale exactly
            let exact: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v * 4.0).collect()).collect();
            prop_assert_eq!(conciseness(&expl(exact, vec![0.0; 3], &grid)).unwrap().to_bits(), base.to_bits());
            let tripled: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v * 3.0).collect()).collect();
            prop_assert!((conciseness(&expl(tripled, vec![0.0; 3], &grid)).unwrap() - base).abs() < 1e-14);
        }

        #[test]
        fn robustness_is_permutation_invariant(ms in prop::collection::vec(matrix(4, 2), 2..6), rot in 0usize..6) {
            let grid = build_grid([1, 4, 4], 2, 2).unwrap();
            let es: Vec<Explanation> = ms.iter().map(|m| expl(m.clone(), vec![0.5; 2], &grid)).collect();
            let mut shuffled = es.clone();
            shuffled.reverse();
            let len = shuffled.len();
            shuffled.rotate_left(rot % len);
            let a = robustness(&es).unwrap();
            prop_assert_eq!(a.to_bits(), robustness(&shuffled).unwrap().to_bits());
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn greedy_flip_is_a_real_flip_and_never_beats_exhaustive(
            f in 2usize..=10, k in 2usize..=4, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Surrogate {
                a: (0..f).map(|_| (0..k).map(|_| rng.random_range(-0.3..0.3)).collect()).collect(),
                b: (0..k).map(|_| rng.random_range(0.0..1.0)).collect(),
            };
            let min = exhaustive_min_flip(&s);
            match greedy_flip_mask(&s) {
                Some(z) => {
                    let c = argmax(&s.predict(&vec![1.0; f]));
                    prop_assert_ne!(argmax(&s.predict_mask(&z)), c);
                    prop_assert!(z.hidden_count() >= min.unwrap());
                }
                // greedy ends at the all-hidden mask, so no flip there either
                None => prop_assert_eq!(argmax(&s.b), argmax(&s.predict(&vec![1.0; f]))),
            }
        }
    }
}
