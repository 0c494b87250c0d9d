//! Operating-point selection on the empirical ROC step function.
//!
//! Matching a target means meeting or exceeding it on the matched axis and
//! then maximizing the other axis. Remaining ties go to the higher
//! threshold. No interpolation: every returned point is achievable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roc::{apply_threshold, threshold_counts, PerformancePoint, RocError, Scored};

/// Slack when comparing an empirical proportion against a target, so that
/// targets computed as means of proportions are not missed by rounding.
pub const TARGET_TOLERANCE: f64 = 1e-12;

pub const WHO_MIN_SENSITIVITY: f64 = 0.90;
pub const WHO_MIN_SPECIFICITY: f64 = 0.70;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatingPointError {
    #[error(transparent)]
    Roc(#[from] RocError),
    #[error("target {0} outside [0, 1]")]
    InvalidTarget(f64),
    #[error("reader panel is empty")]
    EmptyPanel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    Prespecified,
    SensAtSpec,
    SpecAtSens,
    MatchMeanReader,
    MatchIndividualReader,
}

/// The axis whose target must be met.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchAxis {
    Sensitivity,
    Specificity,
}

impl MatchAxis {
    pub fn of(self, p: &PerformancePoint) -> f64 {
        match self {
            MatchAxis::Sensitivity => p.sensitivity,
            MatchAxis::Specificity => p.specificity,
        }
    }

    pub fn other(self) -> MatchAxis {
        match self {
            MatchAxis::Sensitivity => MatchAxis::Specificity,
            MatchAxis::Specificity => MatchAxis::Sensitivity,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MatchAxis::Sensitivity => "sensitivity",
            MatchAxis::Specificity => "specificity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub point: PerformancePoint,
    pub selection_rule: SelectionRule,
    pub target: Option<f64>,
}

pub fn prespecified(data: &Scored, threshold: f64) -> Result<OperatingPoint, OperatingPointError> {
    Ok(OperatingPoint {
        threshold,
        point: apply_threshold(data, threshold)?,
        selection_rule: SelectionRule::Prespecified,
        target: None,
    })
}

/// Every achievable point: one per distinct score, plus a threshold just
/// above the maximum score where nothing is called positive.
fn candidates(data: &Scored) -> Result<Vec<PerformancePoint>, RocError> {
    let (counts, n_pos, n_neg) = threshold_counts(data)?;
    let above_max = counts[0].threshold.next_up();
    let mut out = Vec::with_capacity(counts.len() + 1);
    out.push(PerformancePoint::from_counts(
        0,
        n_pos,
        n_neg,
        n_neg,
        Some(above_max),
    ));
    out.extend(counts.iter().map(|c| {
        PerformancePoint::from_counts(
            c.true_positives,
            n_pos,
            n_neg - c.false_positives,
            n_neg,
            Some(c.threshold),
        )
    }));
    Ok(out)
}

fn select(
    data: &Scored,
    axis: MatchAxis,
    target: f64,
    rule: SelectionRule,
) -> Result<OperatingPoint, OperatingPointError> {
    if !(0.0..=1.0).contains(&target) {
        return Err(OperatingPointError::InvalidTarget(target));
    }
    let other = axis.other();
    let best = candidates(data)?
        .into_iter()
        .filter(|p| axis.of(p) >= target - TARGET_TOLERANCE)
        .max_by(|a, b| {
            other
                .of(a)
                .total_cmp(&other.of(b))
                .then(a.threshold.unwrap().total_cmp(&b.threshold.unwrap()))
        })
        // The lowest threshold reaches sensitivity 1 and the highest
        // specificity 1, so some candidate is always feasible.
        .expect("a feasible operating point always exists");
    Ok(OperatingPoint {
        threshold: best.threshold.unwrap(),
        point: best,
        selection_rule: rule,
        target: Some(target),
    })
}

/// Highest-specificity point with sensitivity at least `target_sens`.
pub fn spec_at_sens(
    data: &Scored,
    target_sens: f64,
) -> Result<OperatingPoint, OperatingPointError> {
    select(
        data,
        MatchAxis::Sensitivity,
        target_sens,
        SelectionRule::SpecAtSens,
    )
}

/// Highest-sensitivity point with specificity at least `target_spec`.
pub fn sens_at_spec(
    data: &Scored,
    target_spec: f64,
) -> Result<OperatingPoint, OperatingPointError> {
    select(
        data,
        MatchAxis::Specificity,
        target_spec,
        SelectionRule::SensAtSpec,
    )
}

pub fn mean_on_axis(panel: &[PerformancePoint], axis: MatchAxis) -> Option<f64> {
    if panel.is_empty() {
        None
    } else {
        Some(panel.iter().map(|p| axis.of(p)).sum::<f64>() / panel.len() as f64)
    }
}

/// Match the arithmetic mean of the panel on `match_on`.
pub fn match_mean_reader(
    data: &Scored,
    panel: &[PerformancePoint],
    match_on: MatchAxis,
) -> Result<OperatingPoint, OperatingPointError> {
    let target = mean_on_axis(panel, match_on).ok_or(OperatingPointError::EmptyPanel)?;
    select(data, match_on, target, SelectionRule::MatchMeanReader)
}

pub fn match_individual_reader(
    data: &Scored,
    reader: &PerformancePoint,
    match_on: MatchAxis,
) -> Result<OperatingPoint, OperatingPointError> {
    select(
        data,
        match_on,
        match_on.of(reader),
        SelectionRule::MatchIndividualReader,
    )
}

/// Meets the 90% sensitivity / 70% specificity screening profile.
pub fn who_compliance(point: &PerformancePoint) -> bool {
    point.sensitivity >= WHO_MIN_SENSITIVITY - TARGET_TOLERANCE
        && point.specificity >= WHO_MIN_SPECIFICITY - TARGET_TOLERANCE
}
