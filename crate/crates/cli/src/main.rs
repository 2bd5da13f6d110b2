use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use shield_core::explain::explain;
use shield_core::harness::experiment::{
    example_seed, metric_subset, run_dir, score_examples, train_run, MANIFEST_FILE,
};
use shield_core::harness::reports::{
    compare_metric_rows, read_csv, read_json, write_csv, write_json, CompareParams, MetricRow,
};
use shield_core::harness::{default_output_dir, run_experiment, ExperimentConfig};
use shield_core::masking::build_grid;
use shield_core::model::checkpoint;
use shield_core::trainer::RunManifest;
use shield_core::Classifier;

/// Masked-input consistency training and explanation-quality experiments.
#[derive(Parser, Debug)]
#[command(name = "shield", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)
            .with_context(|| format!("reading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            config.epochs = epochs;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one λ and write its checkpoint, manifest and training log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Percentage of segments hidden; 0 trains the baseline. Defaults to
        /// the first positive λ in the config.
        #[arg(long)]
        lambda: Option<f64>,
        /// Run directory; defaults to <artifact root>/<name>/runs/lambda_<λ>.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Explain one test example with a trained checkpoint.
    Explain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the test split.
        #[arg(long)]
        example: usize,
        /// Output JSON file; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Score explanation metrics on a test subset.
    Metrics {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// λ recorded in the rows; read from the run's manifest when omitted.
        #[arg(long)]
        lambda: Option<f64>,
        /// Overrides the configured number of scored examples.
        #[arg(long)]
        examples: Option<usize>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Bayesian signed tests of treated against baseline metric tables.
    Compare {
        /// Baseline metrics CSV files.
        #[arg(long, required = true, num_args = 1..)]
        baseline: Vec<PathBuf>,
        /// Treated metrics CSV files, covering the same datasets and examples.
        #[arg(long, required = true, num_args = 1..)]
        treated: Vec<PathBuf>,
        #[arg(long, default_value_t = shield_core::stats::DEFAULT_MC_SAMPLES)]
        mc_samples: usize,
        #[arg(long, default_value_t = shield_core::stats::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Posterior JSON output.
        #[arg(short, long)]
        out: PathBuf,
        /// Directory for simplex_<metric>.csv files.
        #[arg(long)]
        simplex_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        simplex_dump: usize,
    },
    /// Full sweep: train every λ, score explanations, compare best λ to baseline.
    RunAll {
        #[command(flatten)]
        config: ConfigArgs,
        /// Experiment directory; defaults to <artifact root>/<name>.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn load_model(path: &Path) -> Result<Classifier> {
    let (model, _) = checkpoint::load::<f64>(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

fn test_split(config: &ExperimentConfig, model: &Classifier) -> Result<shield_core::Dataset> {
    let (_, test) = config.dataset.load()?;
    if test.image_shape() != shield_core::model::Predictor::input_shape(model) {
        bail!(
            "checkpoint expects {:?} images but the dataset has {:?}",
            shield_core::model::Predictor::input_shape(model),
            test.image_shape()
        );
    }
    Ok(test)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, lambda, out } => {
            let config = config.load()?;
            let lambda = lambda
                .or_else(|| config.lambdas.iter().copied().find(|&l| l > 0.0))
                .unwrap_or(0.0);
            let dir = out.unwrap_or_else(|| run_dir(&default_output_dir(&config.name), lambda));
            let (train, test) = config.dataset.load()?;
            let r = train_run(&config, lambda, &train, &test, &dir)?;
            println!(
                "λ={lambda} best epoch {} test accuracy {:.4} loss {:.4} -> {}",
                r.best_epoch,
                r.test_accuracy,
                r.test_loss,
                dir.display()
            );
        }
        Command::Explain {
            config,
            checkpoint,
            example,
            out,
        } => {
            let config = config.load()?;
            let model = load_model(&checkpoint)?;
            let test = test_split(&config, &model)?;
            if example >= test.len() {
                bail!("example {example} outside the {}-image test split", test.len());
            }
            let grid = build_grid(test.image_shape(), config.grid_rows, config.grid_cols)?;
            let mut params = config.explain.explain;
            params.seed = example_seed(config.seed, example);
            let e = explain(&model, &test.image(example), &grid, &params)?;
            match out {
                Some(path) => write_json(&path, &e)?,
                None => println!("{}", serde_json::to_string_pretty(&e)?),
            }
        }
        Command::Metrics {
            config,
            checkpoint,
            lambda,
            examples,
            out,
        } => {
            let mut config = config.load()?;
            if let Some(n) = examples {
                config.metric_examples = n;
            }
            let lambda = match lambda {
                Some(l) => l,
                None => {
                    let manifest = checkpoint.with_file_name(MANIFEST_FILE);
                    let m: RunManifest = read_json(&manifest)
                        .with_context(|| format!("no --lambda given and no readable {}", manifest.display()))?;
                    m.shield.lambda_pct
                }
            };
            let model = load_model(&checkpoint)?;
            let test = test_split(&config, &model)?;
            let ids = metric_subset(&config, test.len());
            let reports = score_examples(&model, &test, &ids, &config)?;
            let (dataset, arch) = (config.dataset.id(), config.model.to_string());
            let rows: Vec<MetricRow> = reports.iter().map(|r| MetricRow::new(&dataset, &arch, lambda, r)).collect();
            write_csv(&out, &rows)?;
            println!("{} metric rows -> {}", rows.len(), out.display());
        }
        Command::Compare {
            baseline,
            treated,
            mc_samples,
            threshold,
            seed,
            out,
            simplex_dir,
            simplex_dump,
        } => {
            let read_all = |paths: &[PathBuf]| -> Result<Vec<MetricRow>> {
                let mut rows = Vec::new();
                for p in paths {
                    rows.extend(read_csv::<MetricRow>(p).with_context(|| format!("reading {}", p.display()))?);
                }
                Ok(rows)
            };
            let (base, treat) = (read_all(&baseline)?, read_all(&treated)?);
            let (report, simplex) = compare_metric_rows(
                &base,
                &treat,
                "baseline",
                "treated",
                CompareParams {
                    mc_samples,
                    threshold,
                    seed,
                    simplex_dump,
                },
            )?;
            write_json(&out, &report)?;
            if let Some(dir) = simplex_dir {
                std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                for (metric, rows) in &simplex {
                    write_csv(&dir.join(format!("simplex_{metric}.csv")), rows)?;
                }
            }
            for s in &report.pooled {
                println!("{:<18} n={:<4} rope={:.4} mean={:.3?} {}", s.metric, s.n, s.rope, s.mean, s.verdict);
            }
            for n in &report.notices {
                log::warn!("{n}");
            }
        }
        Command::RunAll { config, out } => {
            let config = config.load()?;
            let dir = out.unwrap_or_else(|| default_output_dir(&config.name));
            let outcome = run_experiment(&config, &dir)?;
            for r in &outcome.summary {
                println!("λ={:<5} test accuracy {:.4} loss {:.4}", r.lambda_pct, r.test_accuracy, r.test_loss);
            }
            if let Some(p) = &outcome.posteriors {
                println!("best λ {} vs baseline:", outcome.best_lambda.unwrap_or(0.0));
                for s in &p.pooled {
                    println!("  {:<18} mean={:.3?} {}", s.metric, s.mean, s.verdict);
                }
            }
            println!("artifacts -> {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
