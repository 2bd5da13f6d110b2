use crate::error::{Error, Result};
use crate::nd::{NodeId, Tape, PROB_EPS};
use crate::scalar::Scalar;

/// Mean over the batch of `-ln(clamp(p[i, label_i], eps, 1))`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = tape.value(probs)?.shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: shape,
            right: vec![labels.len()],
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::invalid(
            "labels",
            format!("label {bad} out of range for {} classes", shape[1]),
        ));
    }
    let picked = tape.pick(probs, labels)?;
    let safe = tape.clamp(picked, T::lit(PROB_EPS), T::one())?;
    let logs = tape.log(safe)?;
    let mean = tape.mean(logs)?;
    tape.scale(mean, -T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::Tensor;

    fn ce(rows: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(rows)?);
        let l = cross_entropy(&mut tape, p, labels)?;
        tape.value(l)?.item()
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let l = ce(&[vec![1.0, 0.0, 0.0]], &[0]).unwrap();
        assert!(l.abs() <= 1e-6);
    }

    #[test]
    fn uniform_prediction_is_ln_k() {
        let k = 5;
        let l = ce(&[vec![1.0 / k as f64; k]], &[3]).unwrap();
        assert!((l - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_mean_by_hand() {
        let l = ce(&[vec![0.2, 0.8], vec![0.6, 0.4]], &[1, 1]).unwrap();
        let expected = (-(0.8f64).ln() - (0.4f64).ln()) / 2.0;
        assert!((l - expected).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label() {
        assert!(matches!(
            ce(&[vec![0.5, 0.5]], &[2]),
            Err(Error::InvalidArgument { name: "labels", .. })
        ));
    }

    #[test]
    fn zero_probability_stays_finite() {
        let l = ce(&[vec![1.0, 0.0]], &[1]).unwrap();
        assert!((l + (PROB_EPS).ln()).abs() < 1e-9);
    }
}
