//! Bayesian signed test with a region of practical equivalence (ROPE) for
//! paired metric differences.
//!
//! Differences are counted as left (`d < -rope`), rope (`|d| <= rope`) or
//! right (`d > rope`); the posterior over the three probabilities is
//! `Dirichlet(counts + s/3)` with prior strength `s = 1`.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PRIOR_STRENGTH: f64 = 1.0;
pub const DEFAULT_MC_SAMPLES: usize = 100_000;
pub const MIN_MC_SAMPLES: usize = 1000;
pub const DEFAULT_THRESHOLD: f64 = 0.95;

/// `d_i = metric(SHIELD)_i - metric(baseline)_i` over matched examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDifferences {
    pub metric: String,
    pub scope: String,
    pub values: Vec<f64>,
}

impl PairedDifferences {
    pub fn new(metric: impl Into<String>, scope: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid("differences", "need at least two pairs"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("differences", "non-finite difference"));
        }
        Ok(PairedDifferences {
            metric: metric.into(),
            scope: scope.into(),
            values,
        })
    }

    /// Pairs two `(example_id, value)` lists position by position; the ids
    /// must match exactly.
    pub fn from_pairs(
        metric: impl Into<String>,
        scope: impl Into<String>,
        treated: &[(usize, f64)],
        baseline: &[(usize, f64)],
    ) -> Result<Self> {
        if treated.len() != baseline.len() || treated.iter().zip(baseline).any(|(t, b)| t.0 != b.0) {
            return Err(Error::Consistency("paired samples cover different examples".into()));
        }
        Self::new(metric, scope, treated.iter().zip(baseline).map(|(t, b)| t.1 - b.1).collect())
    }

    pub fn concat(metric: impl Into<String>, scope: impl Into<String>, parts: &[&PairedDifferences]) -> Result<Self> {
        Self::new(metric, scope, parts.iter().flat_map(|p| p.values.iter().copied()).collect())
    }
}

/// The 0.25 quantile of `|d|`, interpolating linearly between order
/// statistics.
pub fn rope_from_quantile(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("differences", "empty"));
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let h = (abs.len() - 1) as f64 * 0.25;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(abs.len() - 1);
    Ok(abs[lo] + (h - lo as f64) * (abs[hi] - abs[lo]))
}

/// `(left, rope, right)` counts.
pub fn region_counts(values: &[f64], rope: f64) -> [usize; 3] {
    let mut counts = [0; 3];
    for &d in values {
        let region = if d < -rope {
            0
        } else if d > rope {
            2
        } else {
            1
        };
        counts[region] += 1;
    }
    counts
}

/// Closed-form posterior mean `(n_i + s/3) / (N + s)`.
pub fn dirichlet_mean(counts: [usize; 3], prior: f64) -> [f64; 3] {
    let total = counts.iter().sum::<usize>() as f64 + prior;
    counts.map(|c| (c as f64 + prior / 3.0) / total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTriple {
    /// Points `(p_left, p_rope, p_right)` on the simplex.
    pub samples: Vec<[f64; 3]>,
    pub rope: f64,
    pub counts: [usize; 3],
    pub prior: f64,
}

impl PosteriorTriple {
    pub fn mean(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for s in &self.samples {
            for (a, b) in m.iter_mut().zip(s) {
                *a += b;
            }
        }
        m.map(|v| v / self.samples.len() as f64)
    }

    /// Monte Carlo standard error of each mean component.
    pub fn mean_std_error(&self) -> [f64; 3] {
        let mean = self.mean();
        let n = self.samples.len() as f64;
        let mut var = [0.0; 3];
        for s in &self.samples {
            for i in 0..3 {
                var[i] += (s[i] - mean[i]).powi(2);
            }
        }
        var.map(|v| (v / (n - 1.0)).sqrt() / n.sqrt())
    }

    /// Fraction of samples in which each component is the largest, i.e. the
    /// share of points falling in each third of a ternary plot.
    pub fn dominance(&self) -> [f64; 3] {
        let mut counts = [0usize; 3];
        for s in &self.samples {
            let top = if s[0] > s[1] && s[0] > s[2] {
                0
            } else if s[1] >= s[2] {
                1
            } else {
                2
            };
            counts[top] += 1;
        }
        counts.map(|c| c as f64 / self.samples.len() as f64)
    }
}

pub fn signed_test<R: Rng + ?Sized>(diffs: &PairedDifferences, rope: f64, mc_samples: usize, rng: &mut R) -> Result<PosteriorTriple> {
    if mc_samples < MIN_MC_SAMPLES {
        return Err(Error::invalid("mc_samples", format!("{mc_samples} < {MIN_MC_SAMPLES}")));
    }
    if !(rope >= 0.0 && rope.is_finite()) {
        return Err(Error::invalid("rope", format!("{rope}")));
    }
    let counts = region_counts(&diffs.values, rope);
    let gamma = |c: usize| Gamma::new(c as f64 + PRIOR_STRENGTH / 3.0, 1.0).map_err(|e| Error::invalid("prior", e.to_string()));
    let gammas = [gamma(counts[0])?, gamma(counts[1])?, gamma(counts[2])?];
    let mut samples = Vec::with_capacity(mc_samples);
    while samples.len() < mc_samples {
        let g = [gammas[0].sample(rng), gammas[1].sample(rng), gammas[2].sample(rng)];
        let total = g[0] + g[1] + g[2];
        // all three can underflow together when every shape is tiny
        if total > 0.0 {
            samples.push(g.map(|v| v / total));
        }
    }
    Ok(PosteriorTriple {
        samples,
        rope,
        counts,
        prior: PRIOR_STRENGTH,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Left,
    Rope,
    Right,
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Left => "left",
            Verdict::Rope => "rope",
            Verdict::Right => "right",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// The region whose mean posterior probability exceeds `threshold`.
pub fn verdict_from_mean(mean: [f64; 3], threshold: f64) -> Result<Verdict> {
    if !(threshold > 0.5 && threshold <= 1.0) {
        return Err(Error::invalid("threshold", format!("{threshold} outside (0.5, 1]")));
    }
    Ok(match mean.iter().position(|&p| p > threshold) {
        Some(0) => Verdict::Left,
        Some(1) => Verdict::Rope,
        Some(_) => Verdict::Right,
        None => Verdict::Inconclusive,
    })
}

pub fn verdict(posterior: &PosteriorTriple, threshold: f64) -> Result<Verdict> {
    verdict_from_mean(posterior.mean(), threshold)
}

/// JSON summary of one test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub metric: String,
    pub scope: String,
    pub n: usize,
    pub rope: f64,
    pub counts: [usize; 3],
    pub mean: [f64; 3],
    /// See [`PosteriorTriple::dominance`]; informational, not used by the
    /// verdict.
    pub dominance: [f64; 3],
    pub threshold: f64,
    pub verdict: Verdict,
    pub mc_samples: usize,
}

impl PosteriorSummary {
    pub fn new(diffs: &PairedDifferences, posterior: &PosteriorTriple, threshold: f64) -> Result<Self> {
        Ok(PosteriorSummary {
            metric: diffs.metric.clone(),
            scope: diffs.scope.clone(),
            n: diffs.values.len(),
            rope: posterior.rope,
            counts: posterior.counts,
            mean: posterior.mean(),
            dominance: posterior.dominance(),
            threshold,
            verdict: verdict(posterior, threshold)?,
            mc_samples: posterior.samples.len(),
        })
    }
}

/// ROPE from the quantile rule, then the signed test and its summary.
pub fn compare<R: Rng + ?Sized>(
    diffs: &PairedDifferences,
    mc_samples: usize,
    threshold: f64,
    rng: &mut R,
) -> Result<(PosteriorTriple, PosteriorSummary)> {
    let rope = rope_from_quantile(&diffs.values)?;
    let posterior = signed_test(diffs, rope, mc_samples, rng)?;
    let summary = PosteriorSummary::new(diffs, &posterior, threshold)?;
    Ok((posterior, summary))
}
