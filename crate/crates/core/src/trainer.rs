//! Training loop with a seeded train/validation split, per-epoch validation
//! and best-validation-loss model selection.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{AdamConfig, AdamState, Architecture, Classifier, Predictor};
use crate::nd::{Tape, PROB_EPS};
use crate::scalar::Scalar;
use crate::shield::{total_objective, ShieldConfig};

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    Shuffle = 2,
    Masks = 3,
    Explain = 4,
    Metrics = 5,
    Bayes = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Everything that determines a training run, given the dataset bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub dataset_id: String,
    pub architecture: Architecture,
    pub seed: u64,
    pub shield: ShieldConfig,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
    pub version: String,
}

impl RunManifest {
    pub fn new(dataset_id: impl Into<String>, architecture: Architecture, seed: u64, shield: ShieldConfig) -> Self {
        RunManifest {
            dataset_id: dataset_id.into(),
            architecture,
            seed,
            shield,
            optimizer: AdamConfig::default(),
            epochs: 80,
            batch_size: 32,
            validation_fraction: 0.1,
            checkpoint_path: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shield.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("manifest", "epochs and batch_size must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid(
                "validation_fraction",
                format!("{} outside (0, 1)", self.validation_fraction),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub shield_term_mean: f64,
    pub wallclock_ms: u64,
}

/// One record per completed epoch, numbered from 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: [&str; 7] = [
    "epoch",
    "train_loss",
    "train_acc",
    "val_loss",
    "val_acc",
    "shield_term_mean",
    "wallclock_ms",
];

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.records.is_empty() {
            w.write_record(TRAIN_LOG_HEADER)?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != TRAIN_LOG_HEADER {
            return Err(Error::Consistency(format!("unexpected train log header {header:?}")));
        }
        let records = r.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(TrainLog { records })
    }

    pub fn min_val_loss(&self) -> Option<f64> {
        self.records.iter().map(|r| r.val_loss).min_by(f64::total_cmp)
    }
}

/// Seeded shuffle followed by a `(1 - validation_fraction, validation_fraction)`
/// partition. The validation part holds `round(n * fraction)` examples,
/// at least one and at most `n - 1`.
pub fn split<T: Scalar>(dataset: &Dataset<T>, seed: u64, validation_fraction: f64) -> Result<(Dataset<T>, Dataset<T>)> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::invalid("dataset", "need at least two examples to split"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Split));
    let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(1, n - 1);
    let (val, train) = order.split_at(n_val);
    Ok((dataset.subset(train)?, dataset.subset(val)?))
}

/// Mean cross-entropy and argmax accuracy, without gradient recording.
pub fn evaluate<T: Scalar, P: Predictor<T> + ?Sized>(model: &P, dataset: &Dataset<T>) -> Result<(f64, f64)> {
    const CHUNK: usize = 256;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (x, labels) = dataset.batch(chunk);
        let probs = model.predict(&x)?;
        for (i, (&label, pred)) in labels.iter().zip(probs.argmax_rows()).enumerate() {
            let p = probs.row(i)[label].as_f64().clamp(PROB_EPS, 1.0);
            loss -= p.ln();
            correct += usize::from(pred == label);
        }
    }
    let n = dataset.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// The returned model and its log.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: Classifier<T>,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Keeps the parameters with the lowest validation loss; the earliest epoch
/// wins ties.
#[derive(Clone, Debug)]
pub struct BestCheckpoint<T> {
    pub epoch: usize,
    pub val_loss: f64,
    pub model: Option<Classifier<T>>,
}

impl<T: Scalar> Default for BestCheckpoint<T> {
    fn default() -> Self {
        BestCheckpoint {
            epoch: 0,
            val_loss: f64::INFINITY,
            model: None,
        }
    }
}

impl<T: Scalar> BestCheckpoint<T> {
    pub fn offer(&mut self, epoch: usize, val_loss: f64, model: &Classifier<T>) -> bool {
        if self.model.is_none() || val_loss < self.val_loss {
            self.epoch = epoch;
            self.val_loss = val_loss;
            self.model = Some(model.clone());
            true
        } else {
            false
        }
    }
}

pub fn train<T: Scalar>(manifest: &RunManifest, dataset: &Dataset<T>) -> Result<TrainOutcome<T>> {
    train_observed(manifest, dataset, |_, _| {})
}

/// [`train`], calling `observe(epoch, model)` after every epoch's updates.
pub fn train_observed<T, F>(manifest: &RunManifest, dataset: &Dataset<T>, mut observe: F) -> Result<TrainOutcome<T>>
where
    T: Scalar,
    F: FnMut(usize, &Classifier<T>),
{
    manifest.validate()?;
    let (train_set, val_set) = split(dataset, manifest.seed, manifest.validation_fraction)?;
    let mut model = Classifier::<T>::new(
        manifest.architecture,
        dataset.image_shape(),
        dataset.num_classes(),
        manifest.seed,
    )?;
    let mut optimizer = AdamState::new(manifest.optimizer, &model.parameters());
    let mut shuffle_rng = stream_rng(manifest.seed, Stream::Shuffle);
    let mut mask_rng = stream_rng(manifest.seed, Stream::Masks);
    let mut best = BestCheckpoint::default();
    let mut log = TrainLog::default();

    for epoch in 1..=manifest.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut term_sum, mut correct, mut batches) = (0.0, 0.0, 0usize, 0usize);
        for (b, chunk) in order.chunks(manifest.batch_size).enumerate() {
            let (x, labels) = train_set.batch(chunk);
            let non_finite = || Error::NonFiniteLoss { epoch, batch: b };
            let mut tape = Tape::new();
            let params = model.track(&mut tape);
            let obj = total_objective(&mut tape, &model, &params, &x, &labels, &manifest.shield, &mut mask_rng)
                .map_err(|e| match e {
                    Error::Domain { .. } => non_finite(),
                    other => other,
                })?;
            let total = tape.value(obj.total)?.item()?.as_f64();
            if !total.is_finite() {
                return Err(non_finite());
            }
            let data_loss = tape.value(obj.data_loss)?.item()?.as_f64();
            loss_sum += data_loss * chunk.len() as f64;
            if let Some(term) = obj.shield {
                term_sum += tape.value(term)?.item()?.as_f64();
            }
            // accuracy of the clean predictions made for this step
            let probs = model.forward(&x)?;
            correct += probs
                .argmax_rows()
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            batches += 1;

            tape.backward(obj.total).map_err(|e| match e {
                Error::Domain { .. } => non_finite(),
                other => other,
            })?;
            model.collect_grads(&tape)?;
            optimizer.step(&mut model.parameters_mut())?;
            model.zero_grad();
        }
        observe(epoch, &model);
        let (val_loss, val_acc) = evaluate(&model, &val_set)?;
        best.offer(epoch, val_loss, &model);
        log.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_loss,
            val_acc,
            shield_term_mean: term_sum / batches as f64,
            wallclock_ms: started.elapsed().as_millis() as u64,
        });
        log::debug!(
            "{} {} λ={} epoch {epoch}: train {:.4} val {val_loss:.4} ({val_acc:.3})",
            manifest.dataset_id,
            manifest.architecture,
            manifest.shield.lambda_pct,
            loss_sum / train_set.len() as f64
        );
    }
    Ok(TrainOutcome {
        model: best.model.expect("at least one epoch"),
        log,
        best_epoch: best.epoch,
        best_val_loss: best.val_loss,
    })
}
