//! Paired comparisons of the algorithm against one reader on the same cases.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::factorial::ln_binomial;

use super::InferenceError;

/// Agreement table: first index is the algorithm, second the reader;
/// `1` = correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairedCounts {
    pub n11: u64,
    pub n10: u64,
    pub n01: u64,
    pub n00: u64,
}

impl PairedCounts {
    pub fn from_rows(algorithm: &[u8], reader: &[u8]) -> Self {
        let mut c = PairedCounts::default();
        for (&a, &r) in algorithm.iter().zip(reader) {
            match (a != 0, r != 0) {
                (true, true) => c.n11 += 1,
                (true, false) => c.n10 += 1,
                (false, true) => c.n01 += 1,
                (false, false) => c.n00 += 1,
            }
        }
        c
    }

    /// Algorithm-only correct.
    pub fn b(&self) -> u64 {
        self.n10
    }

    /// Reader-only correct.
    pub fn c(&self) -> u64 {
        self.n01
    }

    pub fn n(&self) -> u64 {
        self.n11 + self.n10 + self.n01 + self.n00
    }
}

/// `P(X <= k)` for `X ~ Binomial(m, 1/2)`, summed in log space.
fn binomial_half_lower_tail(m: u64, k: u64) -> f64 {
    let log_half_m = -(m as f64) * std::f64::consts::LN_2;
    let logs: Vec<f64> = (0..=k.min(m))
        .map(|i| ln_binomial(m, i) + log_half_m)
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total = logs.iter().map(|l| (l - max).exp()).sum::<f64>();
    (max + total.ln()).exp()
}

/// Exact two-sided McNemar test on the discordant pairs.
pub fn mcnemar_exact(counts: &PairedCounts) -> f64 {
    let m = counts.b() + counts.c();
    if m == 0 {
        return 1.0;
    }
    let k = counts.b().min(counts.c());
    (2.0 * binomial_half_lower_tail(m, k)).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    /// Algorithm minus reader accuracy.
    pub delta: f64,
    pub variance: f64,
    pub z: f64,
    pub p_value: f64,
    /// Variance was zero; p-value is 0 or 1 by the sign of `delta + margin`.
    pub degenerate: bool,
}

/// One-sided Wald test of `accuracy_alg - accuracy_reader > -margin` using
/// the paired-difference variance.
pub fn wald_noninferiority_paired(
    counts: &PairedCounts,
    margin: f64,
) -> Result<PairedTestResult, InferenceError> {
    let n = counts.n();
    if n == 0 {
        return Err(InferenceError::TooSmall {
            what: "cases",
            need: 1,
            got: 0,
        });
    }
    let nf = n as f64;
    let b = counts.b() as f64;
    let c = counts.c() as f64;
    let delta = (b - c) / nf;
    let variance = ((b + c - (b - c).powi(2) / nf) / (nf * nf)).max(0.0);
    let numerator = delta + margin;
    if variance <= 0.0 {
        return Ok(PairedTestResult {
            delta,
            variance,
            z: if numerator > 0.0 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            },
            p_value: if numerator > 0.0 { 0.0 } else { 1.0 },
            degenerate: true,
        });
    }
    let z = numerator / variance.sqrt();
    let std_normal = Normal::standard();
    Ok(PairedTestResult {
        delta,
        variance,
        z,
        p_value: std_normal.sf(z),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn discordant(b: u64, c: u64, n: u64) -> PairedCounts {
        PairedCounts {
            n11: n - b - c,
            n10: b,
            n01: c,
            n00: 0,
        }
    }

    /// Full enumeration with exact integer binomial coefficients.
    fn mcnemar_enumerated(b: u64, c: u64) -> f64 {
        let m = b + c;
        if m == 0 {
            return 1.0;
        }
        let choose = |n: u64, k: u64| -> u128 {
            (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
        };
        let tail: u128 = (0..=b.min(c)).map(|i| choose(m, i)).sum();
        (2.0 * tail as f64 / (1u128 << m) as f64).min(1.0)
    }

    #[test]
    fn mcnemar_example() {
        let p = mcnemar_exact(&discordant(10, 2, 20));
        assert_relative_eq!(p, 158.0 / 4096.0, epsilon = 1e-12);
        assert!((p - 0.03857).abs() < 1e-5);
    }

    #[test]
    fn mcnemar_enumeration_and_symmetry() {
        for b in 0..=20u64 {
            for c in 0..=(20 - b) {
                let p = mcnemar_exact(&discordant(b, c, 40));
                assert_relative_eq!(p, mcnemar_enumerated(b, c), epsilon = 1e-12);
                assert_eq!(p, mcnemar_exact(&discordant(c, b, 40)));
                assert!(p > 0.0 && p <= 1.0);
            }
        }
        assert_eq!(mcnemar_exact(&discordant(5, 5, 20)), 1.0);
    }

    #[test]
    fn mcnemar_large_counts_do_not_underflow() {
        let p = mcnemar_exact(&discordant(700, 650, 2000));
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn wald_examples() {
        let r = wald_noninferiority_paired(&discordant(10, 10, 100), 0.1).unwrap();
        assert_eq!(r.delta, 0.0);
        assert_relative_eq!(r.variance, 20.0 / 10000.0, epsilon = 1e-15);
        assert_relative_eq!(r.z, 2.2360679775, epsilon = 1e-9);
        assert!((r.p_value - 0.0127).abs() < 5e-5);

        let r = wald_noninferiority_paired(&discordant(15, 5, 100), 0.0).unwrap();
        assert_relative_eq!(r.delta, 0.1, epsilon = 1e-15);
        assert_relative_eq!(r.variance, 19.0 / 10000.0, epsilon = 1e-15);
        assert!((r.z - 2.2942).abs() < 1e-4);
        assert!((r.p_value - 0.0109).abs() < 5e-5);
    }

    #[test]
    fn wald_degenerate_and_null() {
        let r = wald_noninferiority_paired(&discordant(0, 0, 50), 0.1).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 0.0);
        let r = wald_noninferiority_paired(&discordant(7, 7, 50), 0.0).unwrap();
        assert_eq!(r.z, 0.0);
        assert_eq!(r.p_value, 0.5);
        assert!(wald_noninferiority_paired(&PairedCounts::default(), 0.1).is_err());
    }

    #[test]
    fn counts_from_rows() {
        let c = PairedCounts::from_rows(&[1, 1, 0, 0, 1], &[1, 0, 1, 0, 0]);
        assert_eq!((c.n11, c.n10, c.n01, c.n00), (1, 2, 1, 1));
        assert_eq!(c.n(), 5);
    }
}
