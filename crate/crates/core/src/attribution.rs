//! Counterfactual attribution of an anomalous interval to variable subsets.
//!
//! Every subset up to the cardinality cap is replaced inside the interval by
//! draws from the conditional nominal distribution, the interval is re-scored
//! on each modified series, and subsets are ranked by their mean
//! post-replacement score within each cardinality. The subset with the lowest
//! mean is the attribution for that cardinality.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{
    apply_replacement, assemble_joint, derive_seed, estimate_stationary_truncated, ConditionalReplacement,
    ReplacementWindow,
};
use crate::detector::{nominal_model, score_against, score_interval};
use crate::diagnostics::Warning;
use crate::error::{Error, Result};
use crate::gaussian::GaussianModel;
use crate::series::{EmbeddingConfig, Interval, MultivariateSeries};

/// Sorted, non-empty set of 0-based variable indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VariableSubset(Vec<usize>);

impl VariableSubset {
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::Config("variable subset must not be empty".into()));
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Stable identity used to derive the subset's random streams.
    pub fn key(&self) -> u64 {
        self.0.iter().fold(0xcbf2_9ce4_8422_2325_u64, |h, &j| {
            (h ^ j as u64).wrapping_mul(0x0100_0000_01b3)
        })
    }

    pub fn names(&self, names: &[String]) -> Vec<String> {
        self.0.iter().map(|&j| names[j].clone()).collect()
    }
}

/// Largest subset size evaluated: `min(requested, ceil(d / 2))`.
pub fn subset_cap(d: usize, requested: Option<usize>) -> usize {
    let bound = d.div_ceil(2);
    requested.map_or(bound, |r| r.min(bound))
}

/// All subsets of `0..d` with `1..=cap` members, by size then lexicographically.
pub fn enumerate_subsets(d: usize, cap: usize) -> Vec<VariableSubset> {
    fn extend(d: usize, size: usize, from: usize, current: &mut Vec<usize>, out: &mut Vec<VariableSubset>) {
        if current.len() == size {
            out.push(VariableSubset(current.clone()));
            return;
        }
        for j in from..d {
            if d - j < size - current.len() {
                break;
            }
            current.push(j);
            extend(d, size, j + 1, current, out);
            current.pop();
        }
    }
    let mut out = Vec::new();
    for size in 1..=cap.min(d) {
        extend(d, size, 0, &mut Vec::with_capacity(size), &mut out);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    /// Requested cardinality cap; never exceeds `ceil(d / 2)`.
    pub max_subset_size: Option<usize>,
    pub realizations: usize,
    pub seed: u64,
    pub embedding: EmbeddingConfig,
    /// Refuse series with more variables than this.
    pub max_variables: usize,
    /// Re-estimate the nominal model from each modified series (default);
    /// when false the original series' outside model is kept fixed.
    pub rescore_nominal: bool,
    pub baseline_bins: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            max_subset_size: None,
            realizations: 10,
            seed: 0,
            embedding: EmbeddingConfig::default(),
            max_variables: 20,
            rescore_nominal: true,
            baseline_bins: DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub subset: Vec<String>,
    pub indices: Vec<usize>,
    pub mean_score: f64,
    pub std_score: f64,
    pub realizations: usize,
    /// 1-based rank among subsets of the same size, ascending mean score.
    pub rank: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedSubset {
    pub subset: Vec<String>,
    pub indices: Vec<usize>,
    pub reason: String,
}

/// Echo of the settings that produced a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub kappa: usize,
    pub tau: usize,
    pub seed: u64,
    pub realizations: usize,
    pub max_subset_size: usize,
    pub interval: Interval,
    /// Steps the window was moved back from the detection; 0 for the detection itself.
    pub offset: usize,
    pub rescore_nominal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub label: String,
    pub original_score: f64,
    pub subsets: Vec<SubsetScore>,
    pub failed: Vec<FailedSubset>,
    pub baseline: BaselineScores,
    pub config: ReportConfig,
    pub warnings: Vec<Warning>,
}

impl AttributionReport {
    /// Lowest-mean subset of each size, smallest size first.
    pub fn best_per_cardinality(&self) -> Vec<&SubsetScore> {
        let mut best: Vec<&SubsetScore> = self.subsets.iter().filter(|s| s.rank == 1).collect();
        best.sort_by_key(|s| s.indices.len());
        best
    }

    pub fn entry(&self, indices: &[usize]) -> Option<&SubsetScore> {
        self.subsets.iter().find(|s| s.indices == indices)
    }

    /// Subsets of one size in rank order.
    pub fn ranked(&self, size: usize) -> Vec<&SubsetScore> {
        let mut v: Vec<&SubsetScore> = self.subsets.iter().filter(|s| s.indices.len() == size).collect();
        v.sort_by_key(|s| s.rank);
        v
    }
}

fn check_inputs(series: &MultivariateSeries, interval: Interval, cfg: &AttributionConfig) -> Result<()> {
    let d = series.d();
    if d < 2 {
        return Err(Error::Config("attribution needs at least 2 variables".into()));
    }
    if d > cfg.max_variables {
        return Err(Error::Config(format!(
            "{d} variables exceed the limit of {}; raise it explicitly to enumerate subsets",
            cfg.max_variables
        )));
    }
    if cfg.realizations == 0 {
        return Err(Error::Config("at least one realization is required".into()));
    }
    if cfg.max_subset_size == Some(0) {
        return Err(Error::Config("max_subset_size must be at least 1".into()));
    }
    cfg.embedding.validate_for(series.n())?;
    interval.check_within(series.n())
}

/// Attributes the anomaly in `interval` to variable subsets.
pub fn attribute(
    series: &MultivariateSeries,
    interval: Interval,
    cfg: &AttributionConfig,
) -> Result<AttributionReport> {
    attribute_window(series, interval, 0, "detection", cfg)
}

/// Attribution over the window `[b - offset - length, b - offset)`, where
/// `[a, b)` is the detection and `length` defaults to `b - a`.
pub fn pre_event_scores(
    series: &MultivariateSeries,
    detection: Interval,
    offset: usize,
    length: Option<usize>,
    cfg: &AttributionConfig,
) -> Result<AttributionReport> {
    let window = pre_event_window(detection, offset, length, series.n())?;
    let label = if offset == 0 && window == detection {
        "detection"
    } else {
        "pre_event"
    };
    attribute_window(series, window, offset, label, cfg)
}

pub fn pre_event_window(detection: Interval, offset: usize, length: Option<usize>, n: usize) -> Result<Interval> {
    let length = length.unwrap_or(detection.len());
    let out_of_range = || {
        Error::Config(format!(
            "window of length {length} ending {offset} steps before the end of {detection} leaves the series"
        ))
    };
    let end = detection.end.checked_sub(offset).ok_or_else(out_of_range)?;
    let start = end.checked_sub(length).ok_or_else(out_of_range)?;
    if length == 0 || end > n {
        return Err(out_of_range());
    }
    Interval::new(start, end)
}

fn attribute_window(
    series: &MultivariateSeries,
    interval: Interval,
    offset: usize,
    label: &str,
    cfg: &AttributionConfig,
) -> Result<AttributionReport> {
    check_inputs(series, interval, cfg)?;
    let d = series.d();
    let emb = cfg.embedding;
    let cap = subset_cap(d, cfg.max_subset_size);
    let mut warnings = Vec::new();

    let original_score = score_interval(series, interval, emb)?;
    let nominal = if cfg.rescore_nominal {
        None
    } else {
        Some(nominal_model(series, interval, emb)?)
    };

    let length = interval.len() + 2 * (emb.kappa - 1);
    let est = estimate_stationary_truncated(series, interval, length - 1)?;
    if est.truncated() {
        warnings.push(Warning::TruncatedLags {
            requested: est.requested_lag,
            estimated: est.covariance.max_lag(),
        });
    }
    let joint = assemble_joint(&est.covariance, &est.mean, length)?;
    if joint.repair_magnitude() > 0.0 {
        warnings.push(Warning::PsdRepair {
            context: format!("joint window {interval}"),
            magnitude: joint.repair_magnitude(),
        });
    }

    let subsets = enumerate_subsets(d, cap);
    let outcomes: Vec<(VariableSubset, Result<SubsetDraws>)> = subsets
        .into_par_iter()
        .map(|subset| {
            let res = evaluate_subset(series, interval, &subset, &joint, nominal.as_ref(), cfg);
            (subset, res)
        })
        .collect();

    let mut entries = Vec::new();
    let mut failed = Vec::new();
    for (subset, outcome) in outcomes {
        let names = subset.names(series.names());
        match outcome {
            Ok((scores, repair)) => {
                if repair > 0.0 {
                    warnings.push(Warning::PsdRepair {
                        context: format!("conditional for {{{}}}", names.join(",")),
                        magnitude: repair,
                    });
                }
                let (mean_score, std_score) = mean_std(&scores);
                entries.push(SubsetScore {
                    subset: names,
                    indices: subset.indices().to_vec(),
                    mean_score,
                    std_score,
                    realizations: scores.len(),
                    rank: 0,
                    scores,
                });
            }
            Err(e) => {
                warnings.push(Warning::SubsetFailed {
                    subset: names.clone(),
                    reason: e.to_string(),
                });
                failed.push(FailedSubset {
                    subset: names,
                    indices: subset.indices().to_vec(),
                    reason: e.to_string(),
                });
            }
        }
    }
    rank_within_cardinality(&mut entries);

    let baseline = univariate_baseline(series, interval, cfg.baseline_bins)?;
    warnings.extend(baseline.warnings.iter().cloned());

    Ok(AttributionReport {
        label: label.to_owned(),
        original_score,
        subsets: entries,
        failed,
        baseline,
        config: ReportConfig {
            kappa: emb.kappa,
            tau: emb.tau,
            seed: cfg.seed,
            realizations: cfg.realizations,
            max_subset_size: cap,
            interval,
            offset,
            rescore_nominal: cfg.rescore_nominal,
        },
        warnings,
    })
}

/// Post-replacement scores and the largest conditional PSD repair.
type SubsetDraws = (Vec<f64>, f64);

fn evaluate_subset(
    series: &MultivariateSeries,
    interval: Interval,
    subset: &VariableSubset,
    joint: &GaussianModel,
    nominal: Option<&GaussianModel>,
    cfg: &AttributionConfig,
) -> Result<SubsetDraws> {
    let window = ReplacementWindow::new(interval, cfg.embedding.kappa, subset.indices(), series.d())?;
    let conditional = ConditionalReplacement::new(joint, &window, series)?;
    let scores = (0..cfg.realizations)
        .map(|r| {
            let seed = derive_seed(cfg.seed, &[subset.key(), r as u64]);
            let modified = apply_replacement(series, &window, &conditional.sample(seed))?;
            match nominal {
                None => score_interval(&modified, interval, cfg.embedding),
                Some(q) => score_against(&modified, interval, cfg.embedding, q),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((scores, conditional.repair_magnitude()))
}

/// One counterfactual series for `subset`, drawn with the first realization's seed.
pub fn preview_replacement(
    series: &MultivariateSeries,
    interval: Interval,
    subset: &VariableSubset,
    cfg: &AttributionConfig,
) -> Result<MultivariateSeries> {
    check_inputs(series, interval, cfg)?;
    let length = interval.len() + 2 * (cfg.embedding.kappa - 1);
    let est = estimate_stationary_truncated(series, interval, length - 1)?;
    let joint = assemble_joint(&est.covariance, &est.mean, length)?;
    let window = ReplacementWindow::new(interval, cfg.embedding.kappa, subset.indices(), series.d())?;
    let conditional = ConditionalReplacement::new(&joint, &window, series)?;
    apply_replacement(
        series,
        &window,
        &conditional.sample(derive_seed(cfg.seed, &[subset.key(), 0])),
    )
}

fn mean_std(scores: &[f64]) -> (f64, f64) {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    if scores.len() < 2 {
        return (mean, 0.0);
    }
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn rank_within_cardinality(entries: &mut [SubsetScore]) {
    let sizes: std::collections::BTreeSet<usize> = entries.iter().map(|e| e.indices.len()).collect();
    for size in sizes {
        let mut idx: Vec<usize> = (0..entries.len())
            .filter(|&i| entries[i].indices.len() == size)
            .collect();
        idx.sort_by(|&a, &b| {
            entries[a]
                .mean_score
                .total_cmp(&entries[b].mean_score)
                .then_with(|| entries[a].indices.cmp(&entries[b].indices))
        });
        for (rank, i) in idx.into_iter().enumerate() {
            entries[i].rank = rank + 1;
        }
    }
}

pub const DEFAULT_BINS: usize = 30;
pub const BASELINE_SMOOTHING: f64 = 1e-6;

/// Histogram of one variable: `inside` counts the interval's values, `all`
/// counts every observed value, over the shared `edges`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub variable: String,
    pub edges: Vec<f64>,
    pub inside: Vec<u64>,
    pub all: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    pub bins: usize,
    pub smoothing: f64,
    pub interval: Interval,
    pub scores: Vec<f64>,
    pub histograms: Vec<Histogram>,
    pub warnings: Vec<Warning>,
}

impl BaselineScores {
    /// Variable index with the highest univariate score.
    pub fn top_variable(&self) -> usize {
        (0..self.scores.len())
            .max_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    }
}

/// Per-variable discrete `KL(inside || all)` over additive-smoothed
/// histograms on the pooled value range.
pub fn univariate_baseline(series: &MultivariateSeries, interval: Interval, bins: usize) -> Result<BaselineScores> {
    if bins < 2 {
        return Err(Error::Config(format!("baseline needs at least 2 bins, got {bins}")));
    }
    interval.check_within(series.n())?;
    let mut scores = Vec::with_capacity(series.d());
    let mut histograms = Vec::with_capacity(series.d());
    let mut warnings = Vec::new();
    for (j, name) in series.names().iter().enumerate() {
        let inside: Vec<f64> = (interval.start..interval.end)
            .filter_map(|t| series.get(t, j))
            .collect();
        let all: Vec<f64> = series.observed(j).collect();
        if inside.is_empty() || inside.len() == all.len() {
            return Err(Error::Config(format!(
                "variable {name:?} needs observed values inside and outside {interval}"
            )));
        }
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            warnings.push(Warning::ConstantBaselineVariable { variable: name.clone() });
            scores.push(0.0);
            histograms.push(Histogram {
                variable: name.clone(),
                edges: vec![lo, hi],
                inside: vec![inside.len() as u64],
                all: vec![all.len() as u64],
            });
            continue;
        }
        let width = (hi - lo) / bins as f64;
        let bin = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
        let mut h_in = vec![0u64; bins];
        let mut h_all = vec![0u64; bins];
        inside.iter().for_each(|&v| h_in[bin(v)] += 1);
        all.iter().for_each(|&v| h_all[bin(v)] += 1);
        let norm_in = inside.len() as f64 + bins as f64 * BASELINE_SMOOTHING;
        let norm_all = all.len() as f64 + bins as f64 * BASELINE_SMOOTHING;
        let score = h_in
            .iter()
            .zip(&h_all)
            .map(|(&ci, &ca)| {
                let p = (ci as f64 + BASELINE_SMOOTHING) / norm_in;
                let q = (ca as f64 + BASELINE_SMOOTHING) / norm_all;
                p * (p / q).ln()
            })
            .sum::<f64>()
            .max(0.0);
        scores.push(score);
        let edges = (0..=bins)
            .map(|k| if k == bins { hi } else { lo + k as f64 * width })
            .collect();
        histograms.push(Histogram {
            variable: name.clone(),
            edges,
            inside: h_in,
            all: h_all,
        });
    }
    Ok(BaselineScores {
        bins,
        smoothing: BASELINE_SMOOTHING,
        interval,
        scores,
        histograms,
        warnings,
    })
}
