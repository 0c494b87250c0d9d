//! Hypothesis tests comparing a standalone algorithm with readers.
//!
//! - [`mrmc`]: Obuchowski-Rockette-Hillis noninferiority and superiority
//!   of the algorithm against the average of a reader panel.
//! - [`paired`]: per-reader Wald noninferiority and exact McNemar tests.
//! - [`ks`]: two-sample Kolmogorov-Smirnov distribution-shift test.

pub mod ks;
pub mod mrmc;
pub mod paired;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::Cohort;

pub use ks::{ks_two_sample, KsResult};
pub use mrmc::{
    classify_endpoint, mrmc_orh_test, orh_inference, sequential_primary_analysis, EndpointOutcome,
    MrmcResult, OrhComponents, TestOutcome,
};
pub use paired::{mcnemar_exact, wald_noninferiority_paired, PairedCounts, PairedTestResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("no {0} cases in the cohort")]
    EmptyEndpoint(Endpoint),
    #[error("incomplete reads ({count} missing), e.g. {examples}")]
    MissingReads { count: usize, examples: String },
    #[error("need at least {need} {what}, got {got}")]
    TooSmall {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Sensitivity,
    Specificity,
}

impl Endpoint {
    pub fn as_str(self) -> &'static str {
        match self {
            Endpoint::Sensitivity => "sensitivity",
            Endpoint::Specificity => "specificity",
        }
    }

    /// Cases entering this endpoint: positives for sensitivity.
    pub fn includes(self, positive: bool) -> bool {
        match self {
            Endpoint::Sensitivity => positive,
            Endpoint::Specificity => !positive,
        }
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoninferiorityConfig {
    /// Absolute margin on the proportion scale.
    pub margin: f64,
    /// One-sided alpha for secondary analyses and the superiority stage.
    pub alpha: f64,
    /// One-sided alpha for the primary noninferiority tests (two endpoints).
    pub alpha_primary: f64,
    /// `false` for endpoints where lower values are better, e.g. error rates.
    pub higher_is_better: bool,
}

impl Default for NoninferiorityConfig {
    fn default() -> Self {
        NoninferiorityConfig {
            margin: 0.10,
            alpha: 0.025,
            alpha_primary: 0.0125,
            higher_is_better: true,
        }
    }
}

impl NoninferiorityConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(InferenceError::InvalidConfig(format!(
                "margin {} outside (0, 1)",
                self.margin
            )));
        }
        if !(self.alpha_primary > 0.0 && self.alpha_primary <= self.alpha && self.alpha < 0.5) {
            return Err(InferenceError::InvalidConfig(format!(
                "need 0 < alpha_primary ({}) <= alpha ({}) < 0.5",
                self.alpha_primary, self.alpha
            )));
        }
        Ok(())
    }
}

/// Which alpha gates the superiority stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStage {
    Primary,
    Secondary,
}

impl TestStage {
    pub fn alpha(self, config: &NoninferiorityConfig) -> f64 {
        match self {
            TestStage::Primary => config.alpha_primary,
            TestStage::Secondary => config.alpha,
        }
    }
}

pub const ALGORITHM_ROW: &str = "algorithm";

/// Per-case correctness of the algorithm (row 0) and each reader.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectnessMatrix {
    pub endpoint: Endpoint,
    pub participants: Vec<String>,
    pub case_ids: Vec<String>,
    pub rows: Vec<Vec<u8>>,
}

impl CorrectnessMatrix {
    /// Build directly from rows; row 0 is the algorithm.
    pub fn from_rows(endpoint: Endpoint, rows: Vec<Vec<u8>>) -> Result<Self, InferenceError> {
        let n = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(InferenceError::LengthMismatch(n, bad.len()));
        }
        let mut participants = vec![ALGORITHM_ROW.to_owned()];
        participants.extend((1..rows.len()).map(|j| format!("reader{j}")));
        Ok(CorrectnessMatrix {
            endpoint,
            participants,
            case_ids: (0..n).map(|k| format!("case{k}")).collect(),
            rows,
        })
    }

    pub fn n_cases(&self) -> usize {
        self.case_ids.len()
    }

    pub fn n_readers(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    pub fn accuracy(&self, row: usize) -> f64 {
        let r = &self.rows[row];
        r.iter().map(|&x| x as f64).sum::<f64>() / r.len() as f64
    }

    /// Paired outcome counts of the algorithm against reader row `row`.
    pub fn paired_counts(&self, row: usize) -> PairedCounts {
        PairedCounts::from_rows(&self.rows[0], &self.rows[row])
    }
}

/// Correctness of the thresholded algorithm and of each listed reader on
/// the cases of `endpoint`. Every reader must have read every such case.
pub fn correctness_matrix(
    cohort: &Cohort,
    readers: &[String],
    endpoint: Endpoint,
    threshold: f64,
) -> Result<CorrectnessMatrix, InferenceError> {
    let cases: Vec<_> = cohort
        .cases
        .iter()
        .filter(|c| endpoint.includes(c.tb_label.is_positive()))
        .collect();
    if cases.is_empty() {
        return Err(InferenceError::EmptyEndpoint(endpoint));
    }
    let index: HashMap<(&str, &str), bool> = cohort
        .reads
        .iter()
        .map(|r| {
            (
                (r.case_id.as_str(), r.reader_id.as_str()),
                r.tb_call.is_positive(),
            )
        })
        .collect();

    let mut rows = Vec::with_capacity(readers.len() + 1);
    rows.push(
        cases
            .iter()
            .map(|c| u8::from((c.dls_tb_score >= threshold) == c.tb_label.is_positive()))
            .collect::<Vec<u8>>(),
    );
    let mut gaps = Vec::new();
    for reader in readers {
        let mut row = Vec::with_capacity(cases.len());
        for c in &cases {
            match index.get(&(c.case_id.as_str(), reader.as_str())) {
                Some(&call) => row.push(u8::from(call == c.tb_label.is_positive())),
                None => {
                    gaps.push(format!("{reader}/{}", c.case_id));
                    row.push(0);
                }
            }
        }
        rows.push(row);
    }
    if !gaps.is_empty() {
        let examples = gaps.iter().take(5).cloned().collect::<Vec<_>>().join(", ");
        return Err(InferenceError::MissingReads {
            count: gaps.len(),
            examples,
        });
    }
    let mut participants = vec![ALGORITHM_ROW.to_owned()];
    participants.extend(readers.iter().cloned());
    Ok(CorrectnessMatrix {
        endpoint,
        participants,
        case_ids: cases.iter().map(|c| c.case_id.clone()).collect(),
        rows,
    })
}

/// Leave-one-case-out jackknife covariance of the means of `a` and `b`.
pub fn jackknife_covariance(a: &[f64], b: &[f64]) -> Result<f64, InferenceError> {
    if a.len() != b.len() {
        return Err(InferenceError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(InferenceError::TooSmall {
            what: "cases",
            need: 2,
            got: n,
        });
    }
    let nf = n as f64;
    let sum_a: f64 = a.iter().sum();
    let sum_b: f64 = b.iter().sum();
    // The mean of the leave-one-out means equals the full-sample mean.
    let mean_a = sum_a / nf;
    let mean_b = sum_b / nf;
    let cross: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let loo_a = (sum_a - x) / (nf - 1.0);
            let loo_b = (sum_b - y) / (nf - 1.0);
            (loo_a - mean_a) * (loo_b - mean_b)
        })
        .sum();
    Ok((nf - 1.0) / nf * cross)
}
