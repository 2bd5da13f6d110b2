//! Masked-input consistency regularizer.
//!
//! For an input `x` and a copy `x'` in which a random `lambda_pct` percent of
//! the grid segments are painted with the image's mean colour, the term is
//! `KL(f(x') || f(x)) + KL(f(x) || f(x'))`. Gradients flow through both
//! forward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{mask_batch, select_hidden, FeatureMask, SegmentGrid};
use crate::model::{cross_entropy, Classifier, Predictor};
use crate::nd::{NodeId, Tape, Tensor, PROB_EPS};
use crate::scalar::Scalar;

/// Tolerance on probability rows entering [`kl_div`].
pub const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShieldConfig {
    /// Percentage of segments hidden in each masked copy, in `[0, 100]`.
    pub lambda_pct: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Multiplier of the term in the training objective.
    pub weight: f64,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        ShieldConfig {
            lambda_pct: 10.0,
            grid_rows: 8,
            grid_cols: 8,
            weight: 1.0,
        }
    }
}

impl ShieldConfig {
    /// The unregularized configuration.
    pub fn disabled() -> Self {
        ShieldConfig {
            lambda_pct: 0.0,
            weight: 0.0,
            ..Default::default()
        }
    }

    pub fn with_lambda(lambda_pct: f64) -> Self {
        ShieldConfig {
            lambda_pct,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.lambda_pct) {
            return Err(Error::invalid("lambda_pct", format!("{} outside [0, 100]", self.lambda_pct)));
        }
        if !(self.weight >= 0.0) || !self.weight.is_finite() {
            return Err(Error::invalid("weight", format!("{} is not a finite value >= 0", self.weight)));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::invalid("grid", "rows and cols must be positive"));
        }
        Ok(())
    }

    /// True when the term contributes to the objective at all.
    pub fn is_active(&self) -> bool {
        self.weight > 0.0
    }

    pub fn grid(&self, image_shape: [usize; 3]) -> Result<SegmentGrid> {
        SegmentGrid::new(image_shape, self.grid_rows, self.grid_cols)
    }
}

fn check_rows<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.ndim() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        });
    }
    for i in 0..t.shape()[0] {
        let row = t.row(i);
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|v| *v < T::zero()) {
            return Err(Error::Domain {
                op,
                detail: format!("row {i} is not a probability vector (sum {s})"),
            });
        }
    }
    Ok(())
}

/// Batch mean of `Σ p ln(p / clamp(q, eps, 1))`. Entries with `p = 0`
/// contribute zero; `p` is clamped the same way inside its own logarithm.
pub fn kl_div<T: Scalar>(tape: &mut Tape<T>, p: NodeId, q: NodeId) -> Result<NodeId> {
    let (vp, vq) = (tape.value(p)?, tape.value(q)?);
    if vp.shape() != vq.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_div",
            left: vp.shape().to_vec(),
            right: vq.shape().to_vec(),
        });
    }
    check_rows("kl_div", vp)?;
    check_rows("kl_div", vq)?;
    let batch = vp.shape()[0];
    let eps = T::lit(PROB_EPS);
    let cp = tape.clamp(p, eps, T::one())?;
    let cq = tape.clamp(q, eps, T::one())?;
    let lp = tape.log(cp)?;
    let lq = tape.log(cq)?;
    let ratio = tape.sub(lp, lq)?;
    let terms = tape.mul(p, ratio)?;
    let total = tape.sum(terms)?;
    tape.scale(total, T::lit(1.0 / batch as f64))
}

/// `KL(masked || clean) + KL(clean || masked)`.
pub fn symmetric_kl<T: Scalar>(tape: &mut Tape<T>, clean: NodeId, masked: NodeId) -> Result<NodeId> {
    let forward = kl_div(tape, masked, clean)?;
    let reverse = kl_div(tape, clean, masked)?;
    tape.add(forward, reverse)
}

/// One fresh mask per example.
pub fn draw_masks<R: Rng + ?Sized>(grid: &SegmentGrid, lambda_pct: f64, batch: usize, rng: &mut R) -> Result<Vec<FeatureMask>> {
    (0..batch).map(|_| select_hidden(grid.len(), lambda_pct, rng)).collect()
}

/// The regularization term with caller-chosen masks. `clean` may carry an
/// already recorded `f(x)` to avoid a second clean forward pass.
pub fn shield_term_with_masks<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Classifier<T>,
    params: &[NodeId],
    batch: &Tensor<T>,
    clean: Option<NodeId>,
    grid: &SegmentGrid,
    masks: &[FeatureMask],
) -> Result<NodeId> {
    if grid.image_shape() != model.input_shape() {
        return Err(Error::ShapeMismatch {
            op: "shield_term",
            left: grid.image_shape().to_vec(),
            right: model.input_shape().to_vec(),
        });
    }
    let clean = match clean {
        Some(c) => c,
        None => {
            let x = tape.constant(batch.detached());
            model.forward_on(tape, params, x)?
        }
    };
    let masked = mask_batch(batch, grid, masks)?;
    let xm = tape.constant(masked);
    let masked_probs = model.forward_on(tape, params, xm)?;
    symmetric_kl(tape, clean, masked_probs)
}

/// The regularization term with masks drawn from `rng`.
pub fn shield_term<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    model: &Classifier<T>,
    params: &[NodeId],
    batch: &Tensor<T>,
    config: &ShieldConfig,
    rng: &mut R,
) -> Result<NodeId> {
    config.validate()?;
    let grid = config.grid(model.input_shape())?;
    let masks = draw_masks(&grid, config.lambda_pct, batch.shape()[0], rng)?;
    shield_term_with_masks(tape, model, params, batch, None, &grid, &masks)
}

/// Nodes of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    /// `data_loss + weight * shield`, or exactly `data_loss` when inactive.
    pub total: NodeId,
    pub data_loss: NodeId,
    pub shield: Option<NodeId>,
}

/// Cross-entropy plus the weighted regularization term. With weight 0 the
/// masked forward pass is skipped and no randomness is consumed.
pub fn total_objective<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    model: &Classifier<T>,
    params: &[NodeId],
    batch: &Tensor<T>,
    labels: &[usize],
    config: &ShieldConfig,
    rng: &mut R,
) -> Result<Objective> {
    config.validate()?;
    let masks = if config.is_active() {
        let grid = config.grid(model.input_shape())?;
        Some((draw_masks(&grid, config.lambda_pct, batch.shape()[0], rng)?, grid))
    } else {
        None
    };
    total_objective_with_masks(
        tape,
        model,
        params,
        batch,
        labels,
        config,
        masks.as_ref().map(|(m, g)| (g, m.as_slice())),
    )
}

/// [`total_objective`] with frozen masks.
pub fn total_objective_with_masks<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Classifier<T>,
    params: &[NodeId],
    batch: &Tensor<T>,
    labels: &[usize],
    config: &ShieldConfig,
    masks: Option<(&SegmentGrid, &[FeatureMask])>,
) -> Result<Objective> {
    config.validate()?;
    let x = tape.constant(batch.detached());
    let probs = model.forward_on(tape, params, x)?;
    let data_loss = cross_entropy(tape, probs, labels)?;
    if !config.is_active() {
        return Ok(Objective {
            total: data_loss,
            data_loss,
            shield: None,
        });
    }
    let (grid, masks) = masks.ok_or_else(|| Error::Usage("active regularizer needs masks".into()))?;
    let term = shield_term_with_masks(tape, model, params, batch, Some(probs), grid, masks)?;
    let weighted = tape.scale(term, T::lit(config.weight))?;
    let total = tape.add(data_loss, weighted)?;
    Ok(Objective {
        total,
        data_loss,
        shield: Some(term),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kl_value(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
        let mut tape = Tape::new();
        let (p, q) = (
            tape.constant(Tensor::from_rows(p)?),
            tape.constant(Tensor::from_rows(q)?),
        );
        let k = kl_div(&mut tape, p, q)?;
        tape.value(k)?.item()
    }

    // Direct summation with the same zero convention, used as the oracle.
    fn kl_oracle(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for (pr, qr) in p.iter().zip(q) {
            for (&a, &b) in pr.iter().zip(qr) {
                if a > 0.0 {
                    total += a * (a.max(PROB_EPS).ln() - b.clamp(PROB_EPS, 1.0).ln());
                }
            }
        }
        total / p.len() as f64
    }

    fn random_rows(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Vec<Vec<f64>> {
        (0..b)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect()
    }

    #[test]
    fn kl_examples() {
        assert!(kl_value(&[vec![0.3, 0.7]], &[vec![0.3, 0.7]]).unwrap().abs() < 1e-9);
        let v = kl_value(&[vec![1.0, 0.0]], &[vec![0.5, 0.5]]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let p = random_rows(&mut rng, 3, 5);
            let q = random_rows(&mut rng, 3, 5);
            let v = kl_value(&p, &q).unwrap();
            assert!((v - kl_oracle(&p, &q)).abs() < 1e-12);
            assert!(v >= -1e-9);
        }
    }

    #[test]
    fn kl_rejects_non_probability_rows() {
        assert!(matches!(
            kl_value(&[vec![0.5, 0.6]], &[vec![0.5, 0.5]]),
            Err(Error::Domain { op: "kl_div", .. })
        ));
    }

    fn toy_batch(rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data: Vec<f64> = (0..4 * 16).map(|_| rng.random()).collect();
        Tensor::new([4, 1, 4, 4], data).unwrap()
    }

    fn term_value(model: &mut Classifier<f64>, batch: &Tensor<f64>, cfg: &ShieldConfig, seed: u64) -> f64 {
        let mut tape = Tape::new();
        let params = model.track(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = shield_term(&mut tape, model, &params, batch, cfg, &mut rng).unwrap();
        tape.value(t).unwrap().item().unwrap()
    }

    #[test]
    fn zero_lambda_gives_zero_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = toy_batch(&mut rng);
        let mut model = Classifier::new(Architecture::Mlp { hidden: 8 }, [1, 4, 4], 3, 2).unwrap();
        let cfg = ShieldConfig {
            lambda_pct: 0.0,
            grid_rows: 2,
            grid_cols: 2,
            weight: 1.0,
        };
        assert!(term_value(&mut model, &batch, &cfg, 0).abs() < 1e-9);
    }

    #[test]
    fn input_independent_model_gives_zero_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = toy_batch(&mut rng);
        let mut model = Classifier::new(Architecture::Mlp { hidden: 8 }, [1, 4, 4], 3, 2).unwrap();
        model.parameters_mut()[0].data_mut().fill(0.0);
        let cfg = ShieldConfig {
            lambda_pct: 50.0,
            grid_rows: 2,
            grid_cols: 2,
            weight: 1.0,
        };
        assert!(term_value(&mut model, &batch, &cfg, 3).abs() < 1e-9);
    }

    #[test]
    fn one_feature_toy_matches_hand_computation() {
        // 1×1×2 image, a 1×2 grid, hiding segment 1 replaces x1 with mean(x0, x1).
        let model = Classifier::new(Architecture::Linear, [1, 1, 2], 2, 0)
            .unwrap()
            .with_parameters(vec![
                Tensor::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]]).unwrap(),
                Tensor::new([2], vec![0.0, 0.3]).unwrap(),
            ])
            .unwrap();
        let mut model = model;
        let x = Tensor::new([1, 1, 1, 2], vec![0.2, 0.9]).unwrap();
        let grid = SegmentGrid::new([1, 1, 2], 1, 2).unwrap();
        let mask = FeatureMask::with_hidden(2, [1]);

        let softmax = |l: [f64; 2]| {
            let z = l[0].exp() + l[1].exp();
            [l[0].exp() / z, l[1].exp() / z]
        };
        let logits = |x0: f64, x1: f64| [x0 + 2.0 * x1, -x0 + 0.5 * x1 + 0.3];
        let p = softmax(logits(0.2, 0.9));
        let q = softmax(logits(0.2, 0.55));
        let kl = |a: [f64; 2], b: [f64; 2]| a[0] * (a[0] / b[0]).ln() + a[1] * (a[1] / b[1]).ln();
        let expected = kl(q, p) + kl(p, q);

        let mut tape = Tape::new();
        let params = model.track(&mut tape);
        let t = shield_term_with_masks(&mut tape, &model, &params, &x, None, &grid, &[mask]).unwrap();
        let v = tape.value(t).unwrap().item().unwrap();
        assert!((v - expected).abs() < 1e-10, "{v} vs {expected}");
    }

    #[test]
    fn term_is_symmetric_in_argument_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_rows(&mut rng, 4, 3);
        let q = random_rows(&mut rng, 4, 3);
        let mut tape = Tape::<f64>::new();
        let (a, b) = (
            tape.constant(Tensor::from_rows(&p).unwrap()),
            tape.constant(Tensor::from_rows(&q).unwrap()),
        );
        let ab = symmetric_kl(&mut tape, a, b).unwrap();
        let ba = symmetric_kl(&mut tape, b, a).unwrap();
        let (ab, ba) = (tape.value(ab).unwrap().item().unwrap(), tape.value(ba).unwrap().item().unwrap());
        assert!((ab - ba).abs() < 1e-15);
        assert!(ab > 0.0);
    }

    #[test]
    fn zero_weight_objective_is_exactly_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = toy_batch(&mut rng);
        let labels = [0, 1, 2, 1];
        let mut model = Classifier::new(Architecture::Mlp { hidden: 8 }, [1, 4, 4], 3, 2).unwrap();

        let mut tape = Tape::new();
        let params = model.track(&mut tape);
        let x = tape.constant(batch.clone());
        let probs = model.forward_on(&mut tape, &params, x).unwrap();
        let ce = cross_entropy(&mut tape, probs, &labels).unwrap();
        let ce = tape.value(ce).unwrap().item().unwrap();

        let cfg = ShieldConfig {
            weight: 0.0,
            lambda_pct: 20.0,
            grid_rows: 2,
            grid_cols: 2,
        };
        let mut tape = Tape::new();
        let params = model.track(&mut tape);
        let obj = total_objective(&mut tape, &model, &params, &batch, &labels, &cfg, &mut rng).unwrap();
        assert_eq!(tape.value(obj.total).unwrap().item().unwrap().to_bits(), ce.to_bits());
        assert!(obj.shield.is_none());

        let cfg = ShieldConfig {
            weight: 1.0,
            lambda_pct: 0.0,
            ..cfg
        };
        let mut tape = Tape::new();
        let params = model.track(&mut tape);
        let obj = total_objective(&mut tape, &model, &params, &batch, &labels, &cfg, &mut rng).unwrap();
        assert!((tape.value(obj.total).unwrap().item().unwrap() - ce).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(ShieldConfig::with_lambda(101.0).validate().is_err());
        assert!(ShieldConfig {
            weight: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ShieldConfig::default().validate().is_ok());
    }
}
