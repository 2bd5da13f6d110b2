//! Baseline versus masked-consistency λ sweep, with explanation metrics and
//! Bayesian comparisons of the best λ against the baseline.
//!
//! Output layout under the experiment directory:
//!
//! ```text
//! config.toml
//! runs/lambda_<λ>/{checkpoint.bin, manifest.json, trainlog.csv}
//! summary.csv  convergence.csv  metrics.csv
//! posteriors.json  simplex_<metric>.csv  notices.txt
//! ```

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::reports::{
    compare_metric_rows, write_csv, write_json, CompareParams, ConvergenceRow, MetricRow, PosteriorReport, SummaryRow,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::masking::build_grid;
use crate::model::{checkpoint, Classifier, Predictor};
use crate::revel::{report, MetricReport};
use crate::trainer::{evaluate, stream_rng, train, Stream, TrainLog};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_LOG_FILE: &str = "trainlog.csv";

pub fn run_dir(out: &Path, lambda_pct: f64) -> PathBuf {
    out.join("runs").join(format!("lambda_{lambda_pct}"))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub lambda_pct: f64,
    pub model: Classifier<f64>,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

/// Trains one λ and writes its checkpoint, manifest and log into `dir`.
pub fn train_run(
    config: &ExperimentConfig,
    lambda_pct: f64,
    train_set: &Dataset<f64>,
    test_set: &Dataset<f64>,
    dir: &Path,
) -> Result<RunResult> {
    let mut manifest = config.manifest(lambda_pct);
    manifest.checkpoint_path = Some(PathBuf::from(CHECKPOINT_FILE));
    log::info!("training {} λ={lambda_pct}", manifest.architecture);
    let outcome = train(&manifest, train_set)?;
    create_dir(dir)?;
    checkpoint::save(
        &dir.join(CHECKPOINT_FILE),
        &outcome.model,
        manifest.seed,
        outcome.best_epoch,
        outcome.best_val_loss,
    )?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    let log_path = dir.join(TRAIN_LOG_FILE);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    outcome.log.write_csv(BufWriter::new(file))?;
    let (test_loss, test_accuracy) = evaluate(&outcome.model, test_set)?;
    log::info!("λ={lambda_pct}: test accuracy {test_accuracy:.4}, loss {test_loss:.4}");
    Ok(RunResult {
        lambda_pct,
        model: outcome.model,
        log: outcome.log,
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        test_loss,
        test_accuracy,
    })
}

/// Test examples scored with the explanation metrics: a seeded sample of
/// `min(metric_examples, n)` indices, in ascending order.
pub fn metric_subset(config: &ExperimentConfig, test_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..test_len).collect();
    ids.shuffle(&mut stream_rng(config.seed, Stream::Metrics));
    ids.truncate(config.metric_examples.min(test_len));
    ids.sort_unstable();
    ids
}

/// Explanation seed of one example; shared by every model scored on it.
pub fn example_seed(run_seed: u64, example_id: usize) -> u64 {
    run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (example_id as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Metric reports for the given test examples, computed in parallel.
pub fn score_examples<P: Predictor<f64> + ?Sized>(
    model: &P,
    test_set: &Dataset<f64>,
    ids: &[usize],
    config: &ExperimentConfig,
) -> Result<Vec<MetricReport>> {
    let grid = build_grid(test_set.image_shape(), config.grid_rows, config.grid_cols)?;
    ids.par_iter()
        .map(|&id| {
            let mut params = config.explain;
            params.explain.seed = example_seed(config.seed, id);
            report(model, &test_set.image(id), &grid, &params, id)
        })
        .collect()
}

/// Highest test accuracy among λ > 0; ties go to the lower test loss, then the
/// smaller λ.
pub fn best_shield_run(runs: &[RunResult]) -> Option<&RunResult> {
    runs.iter().filter(|r| r.lambda_pct > 0.0).min_by(|a, b| {
        b.test_accuracy
            .total_cmp(&a.test_accuracy)
            .then(a.test_loss.total_cmp(&b.test_loss))
            .then(a.lambda_pct.total_cmp(&b.lambda_pct))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub summary: Vec<SummaryRow>,
    pub best_lambda: Option<f64>,
    pub posteriors: Option<PosteriorReport>,
    pub notices: Vec<String>,
}

impl ExperimentOutcome {
    pub fn accuracy(&self, lambda_pct: f64) -> Option<f64> {
        self.summary.iter().find(|r| r.lambda_pct == lambda_pct).map(|r| r.test_accuracy)
    }
}

/// Everything `run_experiment` computes, kept in memory for callers that
/// need more than the written artifacts.
#[derive(Clone, Debug)]
pub struct ExperimentRuns {
    pub outcome: ExperimentOutcome,
    pub runs: Vec<RunResult>,
    pub metrics: Vec<MetricRow>,
}

pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    Ok(run_experiment_full(config, out)?.outcome)
}

pub fn run_experiment_full(config: &ExperimentConfig, out: &Path) -> Result<ExperimentRuns> {
    config.validate()?;
    create_dir(out)?;
    let config_path = out.join("config.toml");
    std::fs::write(&config_path, config.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
    let (train_set, test_set) = config.dataset.load()?;
    let dataset_id = config.dataset.id();
    let model_id = config.model.to_string();
    let mut notices = Vec::new();

    // each λ trains independently; a failure keeps the other runs' artifacts
    let results: Vec<Result<RunResult>> = config
        .lambdas
        .par_iter()
        .map(|&l| train_run(config, l, &train_set, &test_set, &run_dir(out, l)))
        .collect();
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;

    let summary: Vec<SummaryRow> = runs
        .iter()
        .map(|r| SummaryRow {
            dataset: dataset_id.clone(),
            model: model_id.clone(),
            lambda_pct: r.lambda_pct,
            test_loss: r.test_loss,
            test_accuracy: r.test_accuracy,
            best_epoch: r.best_epoch,
            best_val_loss: r.best_val_loss,
        })
        .collect();
    write_csv(&out.join("summary.csv"), &summary)?;
    let convergence: Vec<ConvergenceRow> = runs
        .iter()
        .flat_map(|r| {
            r.log.records.iter().map(|e| ConvergenceRow {
                lambda_pct: r.lambda_pct,
                epoch: e.epoch,
                train_loss: e.train_loss,
                train_acc: e.train_acc,
                val_loss: e.val_loss,
                val_acc: e.val_acc,
                shield_term_mean: e.shield_term_mean,
            })
        })
        .collect();
    write_csv(&out.join("convergence.csv"), &convergence)?;

    let baseline = runs.iter().find(|r| r.lambda_pct == 0.0);
    let best = best_shield_run(&runs);
    if baseline.is_none() {
        notices.push("no baseline (λ = 0) in the sweep; Bayesian comparison skipped".to_string());
    }
    if best.is_none() {
        notices.push("no λ > 0 in the sweep; Bayesian comparison skipped".to_string());
    }

    let ids = metric_subset(config, test_set.len());
    let mut metrics = Vec::new();
    for run in baseline.into_iter().chain(best) {
        log::info!("scoring explanations for λ={} on {} examples", run.lambda_pct, ids.len());
        let reports = score_examples(&run.model, &test_set, &ids, config)?;
        metrics.extend(reports.iter().map(|r| MetricRow::new(&dataset_id, &model_id, run.lambda_pct, r)));
    }
    write_csv(&out.join("metrics.csv"), &metrics)?;

    let mut posteriors = None;
    if let (Some(base), Some(best)) = (baseline, best) {
        let split = |l: f64| metrics.iter().filter(|m| m.lambda_pct == l).cloned().collect::<Vec<_>>();
        let (report, simplex) = compare_metric_rows(
            &split(0.0),
            &split(best.lambda_pct),
            &format!("lambda_{}", base.lambda_pct),
            &format!("lambda_{}", best.lambda_pct),
            CompareParams {
                mc_samples: config.mc_samples,
                threshold: config.threshold,
                seed: config.seed,
                simplex_dump: config.simplex_dump,
            },
        )?;
        write_json(&out.join("posteriors.json"), &report)?;
        for (metric, rows) in &simplex {
            write_csv(&out.join(format!("simplex_{metric}.csv")), rows)?;
        }
        notices.extend(report.notices.iter().cloned());
        posteriors = Some(report);
    }
    for n in &notices {
        log::warn!("{n}");
    }
    if !notices.is_empty() {
        let path = out.join("notices.txt");
        std::fs::write(&path, notices.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
    }
    let outcome = ExperimentOutcome {
        summary,
        best_lambda: best.map(|r| r.lambda_pct),
        posteriors,
        notices,
    };
    write_json(&out.join("outcome.json"), &outcome)?;
    Ok(ExperimentRuns { outcome, runs, metrics })
}
