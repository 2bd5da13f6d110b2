//! Experiment orchestration: configuration, the λ sweep and its artifacts.

pub mod config;
pub mod experiment;
pub mod reports;

pub use config::{DatasetSpec, ExperimentConfig};
pub use experiment::{run_experiment, run_experiment_full, ExperimentOutcome, ExperimentRuns};
pub use reports::{MetricRow, PosteriorReport, SummaryRow};

/// Environment variable naming the default artifact root.
pub const ARTIFACT_ROOT_ENV: &str = "SHIELD_ARTIFACT_ROOT";

/// `$SHIELD_ARTIFACT_ROOT/<name>`, or `artifacts/<name>` when unset.
pub fn default_output_dir(name: &str) -> std::path::PathBuf {
    std::env::var_os(ARTIFACT_ROOT_ENV)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| "artifacts".into())
        .join(name)
}
