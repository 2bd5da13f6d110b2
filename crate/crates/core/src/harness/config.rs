//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, synth_shapes, Dataset, ShapeKind, SplitRole};
use crate::error::{Error, Result};
use crate::model::{AdamConfig, Architecture};
use crate::revel::MetricParams;
use crate::stats::{DEFAULT_MC_SAMPLES, DEFAULT_THRESHOLD, MIN_MC_SAMPLES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated shapes; the test split uses `seed + 1`.
    Synth {
        #[serde(default = "default_kinds")]
        classes: Vec<ShapeKind>,
        #[serde(default = "default_size")]
        size: usize,
        train_size: usize,
        test_size: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// IDX files; relative paths resolve against the config file's directory.
    Idx {
        name: String,
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first examples of each split.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

fn default_kinds() -> Vec<ShapeKind> {
    vec![ShapeKind::Bar, ShapeKind::Cross, ShapeKind::Ring]
}

fn default_size() -> usize {
    16
}

fn default_noise() -> f64 {
    0.1
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synth {
            classes: default_kinds(),
            size: default_size(),
            train_size: 600,
            test_size: 300,
            noise: default_noise(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn id(&self) -> String {
        match self {
            DatasetSpec::Synth { classes, size, seed, .. } => format!("synth{}x{size}_k{}_s{seed}", size, classes.len()),
            DatasetSpec::Idx { name, .. } => name.clone(),
        }
    }

    /// `(train, test)`.
    pub fn load(&self) -> Result<(Dataset<f64>, Dataset<f64>)> {
        let (mut train, mut test) = match self {
            DatasetSpec::Synth {
                classes,
                size,
                train_size,
                test_size,
                noise,
                seed,
            } => {
                let k = classes.len().max(1);
                let make = |n: usize, seed: u64, role| -> Result<Dataset<f64>> {
                    let mut d = synth_shapes(n.div_ceil(k).max(1), classes, *size, *noise, seed)?.take(n)?;
                    d.role = role;
                    Ok(d)
                };
                (
                    make(*train_size, *seed, SplitRole::Train)?,
                    make(*test_size, seed.wrapping_add(1), SplitRole::Test)?,
                )
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
                ..
            } => {
                let mut train = load_idx(train_images, train_labels, SplitRole::Train)?;
                let mut test = load_idx(test_images, test_labels, SplitRole::Test)?;
                if let Some(n) = train_limit {
                    train = train.take(*n)?;
                }
                if let Some(n) = test_limit {
                    test = test.take(*n)?;
                }
                (train, test)
            }
        };
        if train.image_shape() != test.image_shape() {
            return Err(Error::Consistency(format!(
                "train images are {:?} but test images are {:?}",
                train.image_shape(),
                test.image_shape()
            )));
        }
        let classes = train.num_classes().max(test.num_classes());
        train.set_num_classes(classes)?;
        test.set_num_classes(classes)?;
        let id = self.id();
        train.name = id.clone();
        test.name = id;
        Ok((train, test))
    }

    fn resolve(&mut self, base: &Path) {
        if let DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = self
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub model: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    /// Percentages of segments hidden; 0 is the baseline.
    pub lambdas: Vec<f64>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Multiplier of the masked-consistency term for λ > 0.
    pub shield_weight: f64,
    pub optimizer: AdamConfig,
    pub dataset: DatasetSpec,
    pub explain: MetricParams,
    /// Test examples scored with the explanation metrics.
    pub metric_examples: usize,
    pub mc_samples: usize,
    pub threshold: f64,
    /// Posterior samples written per metric for ternary plots.
    pub simplex_dump: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            seed: 1,
            model: Architecture::MLP,
            epochs: 80,
            batch_size: 32,
            validation_fraction: 0.1,
            lambdas: vec![0.0, 2.0, 5.0, 10.0, 15.0, 20.0],
            grid_rows: 8,
            grid_cols: 8,
            shield_weight: 1.0,
            optimizer: AdamConfig::default(),
            dataset: DatasetSpec::default(),
            explain: MetricParams::default(),
            metric_examples: 50,
            mc_samples: DEFAULT_MC_SAMPLES,
            threshold: DEFAULT_THRESHOLD,
            simplex_dump: 2000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`; relative dataset paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        config.dataset.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::Config("lambdas must not be empty".into()));
        }
        for (i, l) in self.lambdas.iter().enumerate() {
            if !(0.0..=100.0).contains(l) {
                return Err(Error::Config(format!("lambda {l} outside [0, 100]")));
            }
            if self.lambdas[..i].contains(l) {
                return Err(Error::Config(format!("lambda {l} listed twice")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.mc_samples < MIN_MC_SAMPLES {
            return Err(Error::Config(format!("mc_samples must be at least {MIN_MC_SAMPLES}")));
        }
        if !(self.threshold > 0.5 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0.5, 1]", self.threshold)));
        }
        self.explain.explain.validate()?;
        self.shield_for(1.0).validate()?;
        Ok(())
    }

    /// Training-objective settings for one λ; λ = 0 trains the plain baseline.
    pub fn shield_for(&self, lambda_pct: f64) -> crate::shield::ShieldConfig {
        crate::shield::ShieldConfig {
            lambda_pct,
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            weight: if lambda_pct == 0.0 { 0.0 } else { self.shield_weight },
        }
    }

    pub fn manifest(&self, lambda_pct: f64) -> crate::trainer::RunManifest {
        let mut m = crate::trainer::RunManifest::new(self.dataset.id(), self.model, self.seed, self.shield_for(lambda_pct));
        m.optimizer = self.optimizer;
        m.epochs = self.epochs;
        m.batch_size = self.batch_size;
        m.validation_fraction = self.validation_fraction;
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_documented_values() {
        let c = ExperimentConfig::default();
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.lambdas, vec![0.0, 2.0, 5.0, 10.0, 15.0, 20.0]);
        assert_eq!((c.grid_rows, c.grid_cols), (8, 8));
        assert_eq!(c.explain.explain.samples, 1000);
        assert_eq!(c.explain.explain.sigma, 8.0);
        assert_eq!(c.explain.explain.repeats, 10);
        assert_eq!(c.metric_examples, 50);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let partial = r#"
            name = "tiny"
            model = "linear"
            lambdas = [0, 10]
            epochs = 3
            [dataset]
            kind = "synth"
            train_size = 30
            test_size = 12
            classes = ["bar", "ring"]
            [explain]
            samples = 200
        "#;
        let c = ExperimentConfig::from_toml(partial).unwrap();
        assert_eq!(c.model, Architecture::Linear);
        assert_eq!(c.explain.explain.samples, 200);
        assert_eq!(c.explain.fidelity_samples, 100);
        let (train, test) = c.dataset.load().unwrap();
        assert_eq!((train.len(), test.len()), (30, 12));
        assert_eq!(train.role, SplitRole::Train);
        assert_eq!(test.role, SplitRole::Test);
        assert_ne!(train.images().row(0), test.images().row(0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ExperimentConfig::from_toml("lambdas = [0, 120]").is_err());
        assert!(ExperimentConfig::from_toml("lambdas = [5, 5]").is_err());
        assert!(ExperimentConfig::from_toml("lambdas = []").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("threshold = 0.4").is_err());
    }

    #[test]
    fn baseline_lambda_disables_the_term() {
        let c = ExperimentConfig::default();
        assert_eq!(c.shield_for(0.0).weight, 0.0);
        assert_eq!(c.shield_for(5.0).weight, 1.0);
        let m = c.manifest(5.0);
        assert_eq!(m.shield.lambda_pct, 5.0);
        assert_eq!(m.epochs, 80);
    }
}
