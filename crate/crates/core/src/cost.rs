//! Two-stage screening economics: an image-based triage step gates a
//! confirmatory nucleic-acid test (NAAT).
//!
//! The confirmatory test is taken as perfectly sensitive and specific, so
//! the cases detected by the workflow are exactly the triage true positives,
//! and NAAT-for-all detects every prevalent case.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::operating_point::WHO_MIN_SENSITIVITY;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("no detectable cases: prevalence × sensitivity is zero")]
    NoDetectableCases,
    #[error("invalid cost inputs: {0}")]
    Invalid(String),
}

/// US dollars, held at four decimal places.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Usd(f64);

impl Usd {
    pub fn new(amount: f64) -> Self {
        Usd((amount * 1e4).round() / 1e4)
    }

    pub fn amount(self) -> f64 {
        self.0
    }

    /// Rounded to cents for presentation.
    pub fn cents(self) -> String {
        format!("{:.2}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostInputs {
    pub prevalence: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub cost_confirmatory_test: Usd,
    pub cost_cxr: Usd,
    pub cost_cad: Usd,
}

impl Default for CostInputs {
    fn default() -> Self {
        CostInputs {
            prevalence: 0.10,
            sensitivity: 0.94,
            specificity: 0.95,
            cost_confirmatory_test: Usd::new(13.06),
            cost_cxr: Usd::new(1.49),
            cost_cad: Usd::new(0.0),
        }
    }
}

impl CostInputs {
    pub fn with_performance(sensitivity: f64, specificity: f64) -> Self {
        CostInputs {
            sensitivity,
            specificity,
            ..Default::default()
        }
    }

    pub fn at_prevalence(&self, prevalence: f64) -> Self {
        CostInputs {
            prevalence,
            ..*self
        }
    }

    fn validate(&self) -> Result<(), CostError> {
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(CostError::Invalid(format!(
                "prevalence {} outside (0, 1)",
                self.prevalence
            )));
        }
        for (name, v) in [
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CostError::Invalid(format!("{name} {v} outside [0, 1]")));
            }
        }
        for (name, c) in [
            ("cost_confirmatory_test", self.cost_confirmatory_test),
            ("cost_cxr", self.cost_cxr),
            ("cost_cad", self.cost_cad),
        ] {
            if c.amount().is_nan() || c.amount() < 0.0 {
                return Err(CostError::Invalid(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostResult {
    pub triage_positive_rate: f64,
    pub cost_per_patient_screened: f64,
    pub true_positive_rate_per_patient: f64,
    pub cost_per_case_detected: f64,
    pub naat_only_cost_per_case: f64,
    pub savings_fraction: f64,
}

pub fn evaluate_cost(inputs: &CostInputs) -> Result<CostResult, CostError> {
    inputs.validate()?;
    let p = inputs.prevalence;
    let detected = p * inputs.sensitivity;
    if detected <= 0.0 {
        return Err(CostError::NoDetectableCases);
    }
    let naat = inputs.cost_confirmatory_test.amount();
    let rate = detected + (1.0 - p) * (1.0 - inputs.specificity);
    let per_patient = inputs.cost_cxr.amount() + inputs.cost_cad.amount() + rate * naat;
    let per_case = per_patient / detected;
    let naat_only = naat / p;
    Ok(CostResult {
        triage_positive_rate: rate,
        cost_per_patient_screened: per_patient,
        true_positive_rate_per_patient: detected,
        cost_per_case_detected: per_case,
        naat_only_cost_per_case: naat_only,
        savings_fraction: 1.0 - per_case / naat_only,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub prevalence: f64,
    pub result: CostResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceSweep {
    pub inputs: CostInputs,
    pub rows: Vec<SweepRow>,
    /// Cost per detected case falls strictly as prevalence rises.
    pub cost_decreasing_in_prevalence: bool,
    /// Savings rise (weakly) as prevalence falls.
    pub savings_increasing_as_prevalence_falls: bool,
}

/// `evaluate_cost` on the grid `p_min, p_min + step, ...` up to `p_max`.
pub fn prevalence_sweep(
    template: &CostInputs,
    p_min: f64,
    p_max: f64,
    step: f64,
) -> Result<PrevalenceSweep, CostError> {
    if !(p_min > 0.0 && p_min <= p_max && p_max < 1.0) {
        return Err(CostError::Invalid(format!(
            "need 0 < p_min ({p_min}) <= p_max ({p_max}) < 1"
        )));
    }
    if step.is_nan() || step <= 0.0 {
        return Err(CostError::Invalid(format!("step {step} must be positive")));
    }
    let n = ((p_max - p_min) / step + 1e-9).floor() as usize;
    let mut rows = Vec::with_capacity(n + 1);
    for i in 0..=n {
        // Round grid points so that 0.01 + 9 × 0.01 lands on 0.1 exactly.
        let p = ((p_min + i as f64 * step) * 1e12).round() / 1e12;
        let p = p.min(p_max);
        rows.push(SweepRow {
            prevalence: p,
            result: evaluate_cost(&template.at_prevalence(p))?,
        });
    }
    let cost_decreasing_in_prevalence = rows
        .windows(2)
        .all(|w| w[1].result.cost_per_case_detected < w[0].result.cost_per_case_detected);
    let savings_increasing_as_prevalence_falls = rows
        .windows(2)
        .all(|w| w[0].result.savings_fraction >= w[1].result.savings_fraction);
    Ok(PrevalenceSweep {
        inputs: *template,
        rows,
        cost_decreasing_in_prevalence,
        savings_increasing_as_prevalence_falls,
    })
}

/// Overall detection sensitivity of triage followed by a perfect confirmatory test.
pub fn workflow_sensitivity(inputs: &CostInputs) -> f64 {
    inputs.sensitivity
}

pub fn meets_who_sensitivity_floor(inputs: &CostInputs) -> bool {
    workflow_sensitivity(inputs) >= WHO_MIN_SENSITIVITY - crate::operating_point::TARGET_TOLERANCE
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn savings(se: f64, sp: f64, p: f64) -> f64 {
        evaluate_cost(&CostInputs::with_performance(se, sp).at_prevalence(p))
            .unwrap()
            .savings_fraction
    }

    #[test]
    fn measured_device_at_ten_percent() {
        let r = evaluate_cost(&CostInputs::default()).unwrap();
        // rate = 0.094 + 0.9 × 0.05; cost/patient = 1.49 + 0.139 × 13.06
        assert_relative_eq!(r.triage_positive_rate, 0.139, epsilon = 1e-12);
        assert_relative_eq!(
            r.cost_per_patient_screened,
            1.49 + 0.139 * 13.06,
            epsilon = 1e-12
        );
        assert!((r.cost_per_case_detected - 35.16).abs() < 0.005);
        assert!((r.savings_fraction - 0.731).abs() < 0.0005);
    }

    #[test]
    fn measured_device_at_one_percent() {
        let r = evaluate_cost(&CostInputs::default().at_prevalence(0.01)).unwrap();
        assert!((r.cost_per_case_detected - 240.344).abs() < 0.001);
        assert!((r.savings_fraction - 0.816).abs() < 0.0005);
    }

    #[test]
    fn six_reported_savings_figures() {
        let cases = [
            (0.94, 0.95, 0.10, 0.73),
            (0.94, 0.95, 0.01, 0.82),
            (0.90, 0.70, 0.10, 0.47),
            (0.90, 0.70, 0.01, 0.53),
            (0.90, 0.65, 0.10, 0.42),
            (0.90, 0.65, 0.01, 0.48),
        ];
        for (se, sp, p, expect) in cases {
            let s = savings(se, sp, p);
            assert!((s - expect).abs() <= 0.007, "se {se} sp {sp} p {p}: {s}");
        }
    }

    #[test]
    fn perfect_triage_costs_one_test_per_case() {
        let inputs = CostInputs {
            specificity: 1.0,
            cost_cxr: Usd::new(0.0),
            ..Default::default()
        };
        let r = evaluate_cost(&inputs).unwrap();
        assert_relative_eq!(r.cost_per_case_detected, 13.06, epsilon = 1e-12);
    }

    #[test]
    fn no_detectable_cases() {
        let inputs = CostInputs::with_performance(0.0, 0.9);
        assert_eq!(
            evaluate_cost(&inputs).unwrap_err(),
            CostError::NoDetectableCases
        );
        assert!(evaluate_cost(&CostInputs::default().at_prevalence(0.0)).is_err());
    }

    #[test]
    fn sweep_grid_and_single_point() {
        let s = prevalence_sweep(&CostInputs::default(), 0.01, 0.10, 0.01).unwrap();
        assert_eq!(s.rows.len(), 10);
        assert_eq!(s.rows[0].prevalence, 0.01);
        assert_eq!(s.rows[9].prevalence, 0.10);
        assert!(s.cost_decreasing_in_prevalence);
        assert!(s.savings_increasing_as_prevalence_falls);
        let one = prevalence_sweep(&CostInputs::default(), 0.05, 0.05, 0.01).unwrap();
        assert_eq!(one.rows.len(), 1);
        assert_eq!(
            one.rows[0].result,
            evaluate_cost(&CostInputs::default().at_prevalence(0.05)).unwrap()
        );
        assert!(prevalence_sweep(&CostInputs::default(), 0.1, 0.01, 0.01).is_err());
    }

    #[test]
    fn workflow_sensitivity_floor() {
        for (se, ok) in [(0.94, true), (0.89, false), (0.90, true)] {
            let inputs = CostInputs::with_performance(se, 0.9);
            assert_eq!(workflow_sensitivity(&inputs), se);
            assert_eq!(meets_who_sensitivity_floor(&inputs), ok);
        }
    }

    #[test]
    fn presentation_rounding() {
        assert_eq!(Usd::new(35.16345).cents(), "35.16");
        assert_eq!(Usd::new(1.23456789).amount(), 1.2346);
    }

    proptest! {
        #[test]
        fn savings_invariant_under_cost_scaling(
            p in 0.001f64..0.5, se in 0.05f64..1.0, sp in 0.0f64..1.0, k in 1u32..50,
        ) {
            // Integer scale factors keep four-decimal amounts exact.
            let base = CostInputs { prevalence: p, sensitivity: se, specificity: sp, ..Default::default() };
            let k = k as f64;
            let scaled = CostInputs {
                cost_confirmatory_test: Usd::new(13.06 * k),
                cost_cxr: Usd::new(1.49 * k),
                cost_cad: Usd::new(0.0),
                ..base
            };
            let a = evaluate_cost(&base).unwrap().savings_fraction;
            let b = evaluate_cost(&scaled).unwrap().savings_fraction;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn monotone_in_prevalence_and_specificity(
            p in 0.01f64..0.5, dp in 0.001f64..0.4, se in 0.1f64..1.0, sp in 0.0f64..0.95, dsp in 0.001f64..0.05,
        ) {
            let base = CostInputs { prevalence: p, sensitivity: se, specificity: sp, ..Default::default() };
            let r = evaluate_cost(&base).unwrap();
            let more_p = evaluate_cost(&base.at_prevalence((p + dp).min(0.99))).unwrap();
            prop_assert!(more_p.cost_per_case_detected < r.cost_per_case_detected);
            let more_sp = evaluate_cost(&CostInputs { specificity: sp + dsp, ..base }).unwrap();
            prop_assert!(more_sp.cost_per_case_detected < r.cost_per_case_detected);
            prop_assert!(more_sp.savings_fraction > r.savings_fraction);
        }

        #[test]
        fn triage_identities(p in 0.001f64..0.999, se in 0.001f64..1.0, sp in 0.0f64..1.0) {
            let inputs = CostInputs { prevalence: p, sensitivity: se, specificity: sp, ..Default::default() };
            let r = evaluate_cost(&inputs).unwrap();
            prop_assert!((r.triage_positive_rate - (p * se + (1.0 - p) * (1.0 - sp))).abs() < 1e-15);
            prop_assert!((r.savings_fraction - (1.0 - r.cost_per_case_detected / r.naat_only_cost_per_case)).abs() < 1e-12);
            let free_triage = CostInputs { specificity: 1.0, cost_cxr: Usd::new(0.0), ..inputs };
            prop_assert!((evaluate_cost(&free_triage).unwrap().cost_per_case_detected - 13.06).abs() < 1e-9);
        }
    }
}
