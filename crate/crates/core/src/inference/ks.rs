//! Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.

use serde::{Deserialize, Serialize};

use super::InferenceError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
}

/// `Q(λ) = 2 Σ_{i≥1} (-1)^{i-1} exp(-2 i² λ²)`, clamped to [0, 1].
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for i in 1..=200u32 {
        let term = (-2.0 * (i as f64).powi(2) * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-12 {
            return (2.0 * sum).clamp(0.0, 1.0);
        }
        sign = -sign;
    }
    // Series has not settled: λ is tiny and Q is 1 for all practical purposes.
    1.0
}

/// `sup |F_a - F_b|` over the pooled sample.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n1 - j as f64 / n2).abs());
    }
    // Once one sample is exhausted its CDF is 1; the other's only rises.
    d.max((i as f64 / n1 - j as f64 / n2).abs())
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult, InferenceError> {
    if a.is_empty() || b.is_empty() {
        return Err(InferenceError::TooSmall {
            what: "observations per sample",
            need: 1,
            got: 0,
        });
    }
    let statistic = ks_statistic(a, b);
    let (n1, n2) = (a.len(), b.len());
    let m = (n1 * n2) as f64 / (n1 + n2) as f64;
    let root = m.sqrt();
    let lambda = (root + 0.12 + 0.11 / root) * statistic;
    Ok(KsResult {
        statistic,
        p_value: kolmogorov_q(lambda),
        n1,
        n2,
    })
}
