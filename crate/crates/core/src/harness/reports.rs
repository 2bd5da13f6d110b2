//! CSV and JSON artifact schemas.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::revel::MetricReport;
use crate::stats::{compare, PairedDifferences, PosteriorSummary};

/// A CSV row type with a fixed header.
pub trait CsvSchema: Serialize + DeserializeOwned {
    const HEADER: &'static [&'static str];
}

pub fn write_csv<T: CsvSchema>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    if rows.is_empty() {
        w.write_record(T::HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `path`, rejecting files whose header differs from the schema.
pub fn read_csv<T: CsvSchema>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != T::HEADER {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("header {header:?}, expected {:?}", T::HEADER),
        });
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One row per (model, λ) of the accuracy and loss table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub model: String,
    pub lambda_pct: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl CsvSchema for SummaryRow {
    const HEADER: &'static [&'static str] = &[
        "dataset",
        "model",
        "lambda_pct",
        "test_loss",
        "test_accuracy",
        "best_epoch",
        "best_val_loss",
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub model: String,
    pub lambda_pct: f64,
    pub example_id: usize,
    pub local_concordance: f64,
    pub local_fidelity: f64,
    pub prescriptivity: f64,
    pub conciseness: f64,
    pub robustness: f64,
    pub prescriptivity_flipped: bool,
    pub seed: u64,
    pub samples: usize,
    pub repeats: usize,
    pub fidelity_samples: usize,
}

impl CsvSchema for MetricRow {
    const HEADER: &'static [&'static str] = &[
        "dataset",
        "model",
        "lambda_pct",
        "example_id",
        "local_concordance",
        "local_fidelity",
        "prescriptivity",
        "conciseness",
        "robustness",
        "prescriptivity_flipped",
        "seed",
        "samples",
        "repeats",
        "fidelity_samples",
    ];
}

impl MetricRow {
    pub fn new(dataset: &str, model: &str, lambda_pct: f64, r: &MetricReport) -> Self {
        MetricRow {
            dataset: dataset.to_string(),
            model: model.to_string(),
            lambda_pct,
            example_id: r.example_id,
            local_concordance: r.local_concordance,
            local_fidelity: r.local_fidelity,
            prescriptivity: r.prescriptivity,
            conciseness: r.conciseness,
            robustness: r.robustness,
            prescriptivity_flipped: r.prescriptivity_flipped,
            seed: r.seed,
            samples: r.samples,
            repeats: r.repeats,
            fidelity_samples: r.fidelity_samples,
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "local_concordance" => self.local_concordance,
            "local_fidelity" => self.local_fidelity,
            "prescriptivity" => self.prescriptivity,
            "conciseness" => self.conciseness,
            "robustness" => self.robustness,
            _ => return None,
        })
    }
}

/// Long-format learning curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub lambda_pct: f64,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub shield_term_mean: f64,
}

impl CsvSchema for ConvergenceRow {
    const HEADER: &'static [&'static str] = &[
        "lambda_pct",
        "epoch",
        "train_loss",
        "train_acc",
        "val_loss",
        "val_acc",
        "shield_term_mean",
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexRow {
    pub p_left: f64,
    pub p_rope: f64,
    pub p_right: f64,
}

impl CsvSchema for SimplexRow {
    const HEADER: &'static [&'static str] = &["p_left", "p_rope", "p_right"];
}

/// Bayesian comparisons of a treated run against the baseline, per metric,
/// pooled over datasets and for each dataset on its own.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PosteriorReport {
    pub baseline: String,
    pub treated: String,
    pub pooled: Vec<PosteriorSummary>,
    pub per_dataset: BTreeMap<String, Vec<PosteriorSummary>>,
    pub notices: Vec<String>,
}

impl PosteriorReport {
    pub fn pooled_verdict(&self, metric: &str) -> Option<crate::stats::Verdict> {
        self.pooled.iter().find(|s| s.metric == metric).map(|s| s.verdict)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CompareParams {
    pub mc_samples: usize,
    pub threshold: f64,
    pub seed: u64,
    pub simplex_dump: usize,
}

/// Stream of the comparison seed for scope `scope` (0 = pooled) and metric
/// `metric`; bit 40 keeps these clear of the training streams.
fn compare_rng(seed: u64, scope: usize, metric: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 40) | ((scope as u64) << 8) | metric as u64);
    rng
}

fn pairs_by_dataset(rows: &[MetricRow]) -> BTreeMap<&str, BTreeMap<usize, &MetricRow>> {
    let mut out: BTreeMap<&str, BTreeMap<usize, &MetricRow>> = BTreeMap::new();
    for r in rows {
        out.entry(r.dataset.as_str()).or_default().insert(r.example_id, r);
    }
    out
}

/// Pairs rows by dataset and example id, then runs one signed test per
/// metric over all pairs and one per dataset. Also returns the pooled
/// posterior samples per metric, truncated to `simplex_dump`.
pub fn compare_metric_rows(
    baseline: &[MetricRow],
    treated: &[MetricRow],
    baseline_label: &str,
    treated_label: &str,
    params: CompareParams,
) -> Result<(PosteriorReport, BTreeMap<String, Vec<SimplexRow>>)> {
    let base = pairs_by_dataset(baseline);
    let treat = pairs_by_dataset(treated);
    if base.keys().ne(treat.keys()) {
        return Err(Error::Consistency("baseline and treated rows cover different datasets".into()));
    }
    let mut report = PosteriorReport {
        baseline: baseline_label.into(),
        treated: treated_label.into(),
        ..Default::default()
    };
    let mut simplex = BTreeMap::new();
    for (mi, metric) in MetricReport::METRICS.iter().enumerate() {
        let mut per_dataset = Vec::new();
        for (dataset, b_rows) in &base {
            let t_rows = &treat[dataset];
            if b_rows.keys().ne(t_rows.keys()) {
                return Err(Error::Consistency(format!("{dataset}: paired runs scored different examples")));
            }
            let values: Vec<f64> = b_rows
                .iter()
                .map(|(id, b)| t_rows[id].metric(metric).unwrap() - b.metric(metric).unwrap())
                .collect();
            per_dataset.push((dataset.to_string(), values));
        }
        for (si, (dataset, values)) in per_dataset.iter().enumerate() {
            if values.len() < 2 {
                report
                    .notices
                    .push(format!("{dataset}/{metric}: fewer than two pairs, no test"));
                continue;
            }
            let diffs = PairedDifferences::new(*metric, dataset.as_str(), values.clone())?;
            let (_, summary) = compare(&diffs, params.mc_samples, params.threshold, &mut compare_rng(params.seed, si + 1, mi))?;
            report.per_dataset.entry(dataset.clone()).or_default().push(summary);
        }
        let pooled: Vec<f64> = per_dataset.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        if pooled.len() < 2 {
            report.notices.push(format!("{metric}: fewer than two pairs, no pooled test"));
            continue;
        }
        let diffs = PairedDifferences::new(*metric, "pooled", pooled)?;
        let (posterior, summary) = compare(&diffs, params.mc_samples, params.threshold, &mut compare_rng(params.seed, 0, mi))?;
        report.pooled.push(summary);
        simplex.insert(
            metric.to_string(),
            posterior
                .samples
                .iter()
                .take(params.simplex_dump)
                .map(|s| SimplexRow {
                    p_left: s[0],
                    p_rope: s[1],
                    p_right: s[2],
                })
                .collect(),
        );
    }
    Ok((report, simplex))
}
