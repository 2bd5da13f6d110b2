use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::{NodeId, Tape, Tensor};
use crate::scalar::Scalar;

/// Network topology. Serialized as a short string such as `mlp`, `mlp:64`,
/// `small_conv`, `small_conv:8,16` or `linear`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Architecture {
    /// flatten → dense classes
    Linear,
    /// flatten → dense hidden → relu → dense classes
    Mlp { hidden: usize },
    /// conv 3×3×c1 → relu → 2×2 mean-pool → conv 3×3×c2 → relu → global
    /// mean-pool → dense classes
    SmallConv { channels: [usize; 2] },
}

impl Architecture {
    pub const MLP: Architecture = Architecture::Mlp { hidden: 128 };
    pub const SMALL_CONV: Architecture = Architecture::SmallConv { channels: [16, 32] };
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Linear => write!(f, "linear"),
            Architecture::Mlp { hidden } => write!(f, "mlp:{hidden}"),
            Architecture::SmallConv { channels: [a, b] } => write!(f, "small_conv:{a},{b}"),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || Error::invalid("architecture", format!("cannot parse `{s}`"));
        let num = |t: &str| t.trim().parse::<usize>().ok().filter(|&v| v > 0);
        match (name.trim(), arg) {
            ("linear", None) => Ok(Architecture::Linear),
            ("mlp", None) => Ok(Architecture::MLP),
            ("mlp", Some(a)) => Ok(Architecture::Mlp {
                hidden: num(a).ok_or_else(bad)?,
            }),
            ("small_conv", None) => Ok(Architecture::SMALL_CONV),
            ("small_conv", Some(a)) => {
                let (c1, c2) = a.split_once(',').ok_or_else(bad)?;
                Ok(Architecture::SmallConv {
                    channels: [num(c1).ok_or_else(bad)?, num(c2).ok_or_else(bad)?],
                })
            }
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    /// `weight: [in, out]`, `bias: [out]`
    Dense { weight: Tensor<T>, bias: Tensor<T> },
    /// `kernel: [out, in, 3, 3]`, `bias: [out]`, padding 1
    Conv { kernel: Tensor<T>, bias: Tensor<T> },
    Relu,
    MeanPool2,
    GlobalMeanPool,
    Flatten,
}

/// Anything that maps a batch of images `[b, c, h, w]` to probability rows.
pub trait Predictor<T: Scalar>: Sync {
    fn input_shape(&self) -> [usize; 3];
    fn num_classes(&self) -> usize;
    fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Small image classifier with a softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    architecture: Architecture,
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<Layer<T>>,
}

fn kaiming<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::from_raw(shape, data)
}

impl<T: Scalar> Classifier<T> {
    /// Seeded initialization: weights uniform in `±sqrt(6 / fan_in)`, biases zero.
    pub fn new(
        architecture: Architecture,
        input_shape: [usize; 3],
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_shape.contains(&0) || num_classes < 2 {
            return Err(Error::invalid(
                "classifier",
                format!("input {input_shape:?} with {num_classes} classes"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, h, w] = input_shape;
        let flat = c * h * w;
        let dense = |rng: &mut ChaCha8Rng, i: usize, o: usize| Layer::Dense {
            weight: kaiming(rng, vec![i, o], i),
            bias: Tensor::zeros([o]),
        };
        let conv = |rng: &mut ChaCha8Rng, i: usize, o: usize| Layer::Conv {
            kernel: kaiming(rng, vec![o, i, 3, 3], i * 9),
            bias: Tensor::zeros([o]),
        };
        let layers = match architecture {
            Architecture::Linear => vec![Layer::Flatten, dense(&mut rng, flat, num_classes)],
            Architecture::Mlp { hidden } => vec![
                Layer::Flatten,
                dense(&mut rng, flat, hidden),
                Layer::Relu,
                dense(&mut rng, hidden, num_classes),
            ],
            Architecture::SmallConv { channels: [c1, c2] } => {
                if h < 2 || w < 2 {
                    return Err(Error::invalid("input_shape", "small_conv needs h, w >= 2"));
                }
                vec![
                    conv(&mut rng, c, c1),
                    Layer::Relu,
                    Layer::MeanPool2,
                    conv(&mut rng, c1, c2),
                    Layer::Relu,
                    Layer::GlobalMeanPool,
                    dense(&mut rng, c2, num_classes),
                ]
            }
        };
        Ok(Classifier {
            architecture,
            input_shape,
            num_classes,
            layers,
        })
    }

    /// Replaces every parameter tensor, in layer order (weight then bias).
    /// Shapes must match the existing ones.
    pub fn with_parameters(mut self, values: Vec<Tensor<T>>) -> Result<Self> {
        let mut params = self.parameters_mut();
        if params.len() != values.len() {
            return Err(Error::invalid(
                "parameters",
                format!("expected {} tensors, got {}", params.len(), values.len()),
            ));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "with_parameters",
                    left: p.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            **p = v.detached();
        }
        Ok(self)
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Dense { weight, bias } => vec![weight, bias],
                Layer::Conv { kernel, bias } => vec![kernel, bias],
                _ => vec![],
            })
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Dense { weight, bias } => vec![weight, bias],
                Layer::Conv { kernel, bias } => vec![kernel, bias],
                _ => vec![],
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Registers every parameter on `tape`; the handles feed [`Self::forward_on`].
    pub fn track(&mut self, tape: &mut Tape<T>) -> Vec<NodeId> {
        self.parameters_mut().into_iter().map(|p| tape.track(p)).collect()
    }

    /// Records the forward pass of `input` (`[b, c, h, w]`) on `tape` and
    /// returns the probability node.
    pub fn forward_on(&self, tape: &mut Tape<T>, params: &[NodeId], input: NodeId) -> Result<NodeId> {
        let shape = tape.value(input)?.shape().to_vec();
        self.check_input(&shape)?;
        let batch = shape[0];
        let mut params = params.iter().copied();
        let mut next = || {
            params
                .next()
                .ok_or_else(|| Error::Usage("parameter handles exhausted".into()))
        };
        let mut x = input;
        for layer in &self.layers {
            x = match layer {
                Layer::Dense { .. } => {
                    let (w, b) = (next()?, next()?);
                    let y = tape.matmul(x, w)?;
                    tape.add_bias(y, b)?
                }
                Layer::Conv { .. } => {
                    let (k, b) = (next()?, next()?);
                    let y = tape.conv2d(x, k, 1)?;
                    tape.add_bias(y, b)?
                }
                Layer::Relu => tape.relu(x)?,
                Layer::MeanPool2 => tape.mean_pool2(x)?,
                Layer::GlobalMeanPool => tape.global_mean_pool(x)?,
                Layer::Flatten => {
                    let per = tape.value(x)?.len() / batch;
                    tape.reshape(x, [batch, per])?
                }
            };
        }
        tape.softmax(x)
    }

    /// Probability rows for a batch, without gradient recording.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        let mut tape = Tape::no_grad();
        let mut params: Vec<Tensor<T>> = self.parameters().into_iter().map(Tensor::detached).collect();
        let handles: Vec<NodeId> = params.iter_mut().map(|p| tape.track(p)).collect();
        let x = tape.constant(batch.detached());
        let y = self.forward_on(&mut tape, &handles, x)?;
        Ok(tape.value(y)?.detached())
    }

    /// Adds the gradients collected on `tape` into each parameter's grad buffer.
    pub fn collect_grads(&mut self, tape: &Tape<T>) -> Result<()> {
        for p in self.parameters_mut() {
            tape.write_grad(p)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
            p.set_tape_id(None);
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.input_shape {
            let mut expected = vec![0];
            expected.extend(self.input_shape);
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: shape.to_vec(),
                right: expected,
            });
        }
        Ok(())
    }
}

impl<T: Scalar> Predictor<T> for Classifier<T> {
    fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architecture_strings_round_trip() {
        for a in [
            Architecture::Linear,
            Architecture::MLP,
            Architecture::Mlp { hidden: 7 },
            Architecture::SMALL_CONV,
            Architecture::SmallConv { channels: [2, 3] },
        ] {
            assert_eq!(a.to_string().parse::<Architecture>().unwrap(), a);
        }
        assert!("mlp:0".parse::<Architecture>().is_err());
        assert!("resnet".parse::<Architecture>().is_err());
    }

    #[test]
    fn fresh_mlp_outputs_probabilities() {
        let m = Classifier::<f64>::new(Architecture::MLP, [1, 6, 6], 2, 3).unwrap();
        let x = Tensor::full([3, 1, 6, 6], 0.4);
        let p = m.forward(&x).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        for i in 0..3 {
            let row = p.row(i);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row, p.row(0));
        }
    }

    #[test]
    fn seeded_init_is_bitwise_reproducible() {
        let a = Classifier::<f64>::new(Architecture::SMALL_CONV, [1, 8, 8], 3, 11).unwrap();
        let b = Classifier::<f64>::new(Architecture::SMALL_CONV, [1, 8, 8], 3, 11).unwrap();
        let c = Classifier::<f64>::new(Architecture::SMALL_CONV, [1, 8, 8], 3, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn hand_set_linear_model_matches_hand_softmax() {
        // 1×1×2 input, two classes; logits = x·W + b
        let m = Classifier::<f64>::new(Architecture::Linear, [1, 1, 2], 2, 0)
            .unwrap()
            .with_parameters(vec![
                Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap(),
                Tensor::new([2], vec![0.1, -0.2]).unwrap(),
            ])
            .unwrap();
        let x = Tensor::new([1, 1, 1, 2], vec![2.0, 1.0]).unwrap();
        // logits: [2 + 0.5 + 0.1, -2 + 2 - 0.2] = [2.6, -0.2]
        let (l0, l1) = (2.6f64, -0.2f64);
        let z = l0.exp() + l1.exp();
        let p = m.forward(&x).unwrap();
        assert!((p.data()[0] - l0.exp() / z).abs() < 1e-12);
        assert!((p.data()[1] - l1.exp() / z).abs() < 1e-12);
    }

    #[test]
    fn wrong_input_shape_is_reported() {
        let m = Classifier::<f64>::new(Architecture::MLP, [1, 4, 4], 2, 0).unwrap();
        let err = m.forward(&Tensor::zeros([1, 1, 4, 5])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "forward", .. }));
    }

    #[test]
    fn f32_models_work() {
        let m = Classifier::<f32>::new(Architecture::SMALL_CONV, [1, 6, 6], 3, 1).unwrap();
        let p = m.forward(&Tensor::full([2, 1, 6, 6], 0.5f32)).unwrap();
        assert!((p.row(1).iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
