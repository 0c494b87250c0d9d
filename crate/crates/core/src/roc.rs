//! Empirical ROC curves, AUC, partial AUC, thresholding and percentile
//! bootstrap intervals.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RocError {
    #[error("degenerate labels: need at least one positive and one negative case")]
    DegenerateLabels,
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("invalid TPR band [{lo}, {hi}]")]
    InvalidBand { lo: f64, hi: f64 },
    #[error("invalid bootstrap configuration: {0}")]
    InvalidConfig(String),
    #[error("statistic undefined on too many resamples ({attempts} attempts for {n_resamples} resamples)")]
    BootstrapExhausted { attempts: usize, n_resamples: usize },
}

/// Case scores paired with ground truth (`true` = positive).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scored {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl Scored {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Self {
        assert_eq!(
            scores.len(),
            labels.len(),
            "scores and labels must have equal length"
        );
        Scored { scores, labels }
    }

    /// Build from separate positive and negative score lists.
    pub fn from_classes(positives: &[f64], negatives: &[f64]) -> Self {
        let mut scores = positives.to_vec();
        scores.extend_from_slice(negatives);
        let mut labels = vec![true; positives.len()];
        labels.resize(scores.len(), false);
        Scored { scores, labels }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_neg(&self) -> usize {
        self.len() - self.n_pos()
    }

    pub fn positives(&self) -> Vec<f64> {
        self.iter().filter(|(_, l)| *l).map(|(s, _)| s).collect()
    }

    pub fn negatives(&self) -> Vec<f64> {
        self.iter().filter(|(_, l)| !*l).map(|(s, _)| s).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, bool)> + '_ {
        self.scores.iter().copied().zip(self.labels.iter().copied())
    }

    fn select(&self, idx: &[usize]) -> Scored {
        Scored {
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn check(&self) -> Result<(usize, usize), RocError> {
        if let Some(i) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(RocError::NonFiniteScore(i));
        }
        let n_pos = self.n_pos();
        let n_neg = self.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            return Err(RocError::DegenerateLabels);
        }
        Ok((n_pos, n_neg))
    }
}

/// Cumulative counts when calling positive every case scoring `>= threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdCounts {
    pub threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
}

/// One entry per distinct score, in decreasing threshold order.
pub fn threshold_counts(data: &Scored) -> Result<(Vec<ThresholdCounts>, usize, usize), RocError> {
    let (n_pos, n_neg) = data.check()?;
    let mut order: Vec<(f64, bool)> = data.iter().collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out: Vec<ThresholdCounts> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let score = order[i].0;
        while i < order.len() && order[i].0 == score {
            if order[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(ThresholdCounts {
            threshold: score,
            true_positives: tp,
            false_positives: fp,
        });
    }
    Ok((out, n_pos, n_neg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// `None` for the (0, 0) starting point, which no threshold reaches.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Empirical ROC: one point per distinct score, ties forming one diagonal step.
pub fn roc_curve(data: &Scored) -> Result<RocCurve, RocError> {
    let (counts, n_pos, n_neg) = threshold_counts(data)?;
    let mut points = Vec::with_capacity(counts.len() + 1);
    points.push(RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: None,
    });
    points.extend(counts.iter().map(|c| RocPoint {
        fpr: c.false_positives as f64 / n_neg as f64,
        tpr: c.true_positives as f64 / n_pos as f64,
        threshold: Some(c.threshold),
    }));
    Ok(RocCurve {
        points,
        n_pos,
        n_neg,
    })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Convenience: AUC straight from scores.
pub fn auc_of(data: &Scored) -> Result<f64, RocError> {
    roc_curve(data).map(|c| auc(&c))
}

/// Area `∫ (1 - fpr(tpr)) d tpr` over the band `tpr ∈ [tpr_lo, tpr_hi]`.
pub fn partial_auc(
    curve: &RocCurve,
    tpr_lo: f64,
    tpr_hi: f64,
    normalize: bool,
) -> Result<f64, RocError> {
    if !(0.0..=1.0).contains(&tpr_lo) || !(0.0..=1.0).contains(&tpr_hi) || tpr_lo >= tpr_hi {
        return Err(RocError::InvalidBand {
            lo: tpr_lo,
            hi: tpr_hi,
        });
    }
    let mut area = 0.0;
    for w in curve.points.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b.tpr <= a.tpr {
            // Horizontal step: zero width along the TPR axis.
            continue;
        }
        let lo = a.tpr.max(tpr_lo);
        let hi = b.tpr.min(tpr_hi);
        if hi <= lo {
            continue;
        }
        let fpr_at = |t: f64| a.fpr + (b.fpr - a.fpr) * (t - a.tpr) / (b.tpr - a.tpr);
        area += (hi - lo) * (1.0 - (fpr_at(lo) + fpr_at(hi)) / 2.0);
    }
    Ok(if normalize {
        area / (tpr_hi - tpr_lo)
    } else {
        area
    })
}

/// Sensitivity and specificity at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformancePoint {
    pub sensitivity: f64,
    pub specificity: f64,
    pub threshold: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub true_positives: usize,
    pub true_negatives: usize,
}

impl PerformancePoint {
    pub fn from_counts(
        true_positives: usize,
        n_pos: usize,
        true_negatives: usize,
        n_neg: usize,
        threshold: Option<f64>,
    ) -> Self {
        PerformancePoint {
            sensitivity: true_positives as f64 / n_pos as f64,
            specificity: true_negatives as f64 / n_neg as f64,
            threshold,
            n_pos,
            n_neg,
            true_positives,
            true_negatives,
        }
    }
}

/// Call positive iff `score >= threshold`.
pub fn apply_threshold(data: &Scored, threshold: f64) -> Result<PerformancePoint, RocError> {
    let (n_pos, n_neg) = data.check()?;
    let mut tp = 0;
    let mut tn = 0;
    for (s, l) in data.iter() {
        let called = s >= threshold;
        if l && called {
            tp += 1;
        } else if !l && !called {
            tn += 1;
        }
    }
    Ok(PerformancePoint::from_counts(
        tp,
        n_pos,
        tn,
        n_neg,
        Some(threshold),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub level: f64,
    pub seed: u64,
    /// Resample positives and negatives separately, preserving class counts.
    pub stratified: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_resamples: 1000,
            level: 0.95,
            seed: 20210101,
            stratified: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub n_resamples: usize,
    pub seed: u64,
}

/// 1-based ranks of the lower and upper percentile endpoints among `n`
/// sorted bootstrap values.
pub fn percentile_ranks(n: usize, level: f64) -> (usize, usize) {
    let tail = n as f64 * (1.0 - level) / 2.0;
    let lower = ((tail - 1e-9).ceil() as usize).clamp(1, n);
    (lower, n + 1 - lower)
}

/// Percentile bootstrap interval of `statistic` over case-level resamples.
///
/// Resample `i` draws from stream `i` of `config.seed`, so the interval does
/// not depend on how resamples are scheduled. A resample on which the
/// statistic returns `None` is redrawn from the same stream.
pub fn bootstrap_ci<F>(
    statistic: F,
    data: &Scored,
    config: &BootstrapConfig,
) -> Result<ConfidenceInterval, RocError>
where
    F: Fn(&Scored) -> Option<f64> + Sync,
{
    let n_resamples = config.n_resamples;
    if n_resamples == 0 {
        return Err(RocError::InvalidConfig(
            "n_resamples must be positive".into(),
        ));
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(RocError::InvalidConfig(format!(
            "level {} outside (0, 1)",
            config.level
        )));
    }
    if data.is_empty() {
        return Err(RocError::InvalidConfig("no cases to resample".into()));
    }
    let cap = 10 * n_resamples;
    let pos: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i]).collect();
    let neg: Vec<usize> = (0..data.len()).filter(|&i| !data.labels[i]).collect();

    let draws: Vec<(Option<f64>, usize)> = (0..n_resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(config.seed, i as u64);
            let mut idx = Vec::with_capacity(data.len());
            for attempt in 1..=cap {
                idx.clear();
                if config.stratified {
                    for class in [&pos, &neg] {
                        if !class.is_empty() {
                            idx.extend(
                                (0..class.len()).map(|_| class[rng.random_range(0..class.len())]),
                            );
                        }
                    }
                } else {
                    idx.extend((0..data.len()).map(|_| rng.random_range(0..data.len())));
                }
                if let Some(v) = statistic(&data.select(&idx)).filter(|v| v.is_finite()) {
                    return (Some(v), attempt);
                }
            }
            (None, cap)
        })
        .collect();

    let attempts: usize = draws.iter().map(|d| d.1).sum();
    if attempts > cap || draws.iter().any(|d| d.0.is_none()) {
        return Err(RocError::BootstrapExhausted {
            attempts,
            n_resamples,
        });
    }
    let mut values: Vec<f64> = draws.into_iter().filter_map(|d| d.0).collect();
    values.sort_by(f64::total_cmp);
    let (lo, hi) = percentile_ranks(n_resamples, config.level);
    Ok(ConfidenceInterval {
        lower: values[lo - 1],
        upper: values[hi - 1],
        level: config.level,
        n_resamples,
        seed: config.seed,
    })
}

pub fn sensitivity_at(threshold: f64) -> impl Fn(&Scored) -> Option<f64> + Sync {
    move |d| apply_threshold(d, threshold).ok().map(|p| p.sensitivity)
}

pub fn specificity_at(threshold: f64) -> impl Fn(&Scored) -> Option<f64> + Sync {
    move |d| apply_threshold(d, threshold).ok().map(|p| p.specificity)
}

pub fn auc_statistic(d: &Scored) -> Option<f64> {
    auc_of(d).ok()
}
