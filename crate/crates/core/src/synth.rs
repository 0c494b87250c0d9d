//! Synthetic reader panels with known operating characteristics, and
//! Monte-Carlo calibration of the MRMC test against them.
//!
//! Correlation model (probit latent threshold): case `k` draws a difficulty
//! `u_k ~ N(0, σ²)` shared by every participant. A participant with
//! marginal accuracy `a` is correct on case `k` with probability
//! `Φ(√(1+σ²)·Φ⁻¹(a) + u_k)`, clamped to `[0.001, 0.999]`. The `√(1+σ²)`
//! factor keeps `a` equal to the marginal accuracy over cases.
//!
//! The algorithm also gets a continuous score: `L = Φ⁻¹(p_k) + e` with
//! `e ~ N(0, 1)` so that `P(L > 0) = p_k`; positives score `logistic(L)` and
//! negatives `logistic(-L)`, so thresholding at 0.5 reproduces the
//! correctness draw. With `σ = 0` the two classes are unit-variance normals
//! shifted to give the requested sensitivity and specificity.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::cohort::{
    combine_datasets, CaseRecord, Cohort, CohortError, CohortTag, Label, ReaderInfo, ReaderRead,
    Sex, Status, Symptom,
};
use crate::inference::{
    mrmc_orh_test, CorrectnessMatrix, Endpoint, InferenceError, NoninferiorityConfig, TestStage,
};
use crate::rng::{derive_seed, stream_rng};

pub const MODEL_NAME: &str = "probit_latent_threshold";
pub const PROBABILITY_FLOOR: f64 = 0.001;
pub const PROBABILITY_CEIL: f64 = 0.999;
pub const ALGORITHM_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid panel spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

/// A common value for all readers or one value per reader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReaderValues {
    Common(f64),
    Each(Vec<f64>),
}

impl ReaderValues {
    fn get(&self, j: usize) -> f64 {
        match self {
            ReaderValues::Common(v) => *v,
            ReaderValues::Each(v) => v[j],
        }
    }

    fn check(&self, n_readers: usize, name: &str) -> Result<(), SynthError> {
        let values: &[f64] = match self {
            ReaderValues::Common(v) => std::slice::from_ref(v),
            ReaderValues::Each(v) => {
                if v.len() != n_readers {
                    return Err(SynthError::InvalidSpec(format!(
                        "{name} lists {} values for {n_readers} readers",
                        v.len()
                    )));
                }
                v
            }
        };
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SynthError::InvalidSpec(format!(
                "{name} must lie in [0, 1]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelSpec {
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_readers: usize,
    pub reader_sens: ReaderValues,
    pub reader_spec: ReaderValues,
    /// Standard deviation of per-reader accuracy perturbations.
    pub reader_sens_spread: f64,
    pub algo_sens: f64,
    pub algo_spec: f64,
    /// Standard deviation of the latent per-case difficulty.
    pub case_difficulty_spread: f64,
    pub seed: u64,
    pub dataset: String,
    pub reader_tag: CohortTag,
    /// Reader ids are this prefix followed by a two-digit index.
    pub reader_prefix: String,
    /// Draw demographic and clinical attributes from an independent stream.
    pub attributes: bool,
}

impl Default for PanelSpec {
    fn default() -> Self {
        PanelSpec {
            n_pos: 200,
            n_neg: 300,
            n_readers: 9,
            reader_sens: ReaderValues::Common(0.75),
            reader_spec: ReaderValues::Common(0.85),
            reader_sens_spread: 0.03,
            algo_sens: 0.88,
            algo_spec: 0.80,
            case_difficulty_spread: 0.5,
            seed: 1,
            dataset: "synthetic".into(),
            reader_tag: CohortTag::IndiaBased,
            reader_prefix: "reader".into(),
            attributes: false,
        }
    }
}

impl PanelSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_pos == 0 || self.n_neg == 0 || self.n_readers == 0 {
            return Err(SynthError::InvalidSpec(
                "n_pos, n_neg and n_readers must be at least 1".into(),
            ));
        }
        self.reader_sens.check(self.n_readers, "reader_sens")?;
        self.reader_spec.check(self.n_readers, "reader_spec")?;
        for (name, v) in [("algo_sens", self.algo_sens), ("algo_spec", self.algo_spec)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::InvalidSpec(format!(
                    "{name} must lie in [0, 1]"
                )));
            }
        }
        for (name, v) in [
            ("reader_sens_spread", self.reader_sens_spread),
            ("case_difficulty_spread", self.case_difficulty_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::InvalidSpec(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Copy with the algorithm placed exactly `margin` below the common
    /// reader accuracy on `endpoint`.
    pub fn at_boundary(&self, endpoint: Endpoint, margin: f64) -> PanelSpec {
        let mut spec = self.clone();
        match endpoint {
            Endpoint::Sensitivity => spec.algo_sens = spec.reader_sens.get(0) - margin,
            Endpoint::Specificity => spec.algo_spec = spec.reader_spec.get(0) - margin,
        }
        spec
    }
}

fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROBABILITY_FLOOR, PROBABILITY_CEIL)
}

/// Drawn accuracies of each reader, for reference alongside a panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelTruth {
    pub model: String,
    pub reader_sensitivity: Vec<f64>,
    pub reader_specificity: Vec<f64>,
    pub algo_sensitivity: f64,
    pub algo_specificity: f64,
    pub case_difficulty_spread: f64,
}

/// Raw draws: positives first, then negatives.
struct PanelDraw {
    truth: PanelTruth,
    scores: Vec<f64>,
    /// `reader_correct[j][k]`
    reader_correct: Vec<Vec<bool>>,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn draw_panel(spec: &PanelSpec) -> Result<PanelDraw, SynthError> {
    spec.validate()?;
    let normal = Normal::standard();
    let sigma = spec.case_difficulty_spread;
    let scale = (1.0 + sigma * sigma).sqrt();
    let probit = |a: f64| normal.inverse_cdf(clamp_probability(a)) * scale;

    let mut reader_rng = stream_rng(spec.seed, 0);
    let mut perturb = |base: f64| {
        let e: f64 = reader_rng.sample(StandardNormal);
        clamp_probability(base + spec.reader_sens_spread * e)
    };
    let reader_sensitivity: Vec<f64> = (0..spec.n_readers)
        .map(|j| perturb(spec.reader_sens.get(j)))
        .collect();
    let reader_specificity: Vec<f64> = (0..spec.n_readers)
        .map(|j| perturb(spec.reader_spec.get(j)))
        .collect();
    let z_sens: Vec<f64> = reader_sensitivity.iter().map(|&a| probit(a)).collect();
    let z_spec: Vec<f64> = reader_specificity.iter().map(|&a| probit(a)).collect();
    let z_algo_sens = probit(spec.algo_sens);
    let z_algo_spec = probit(spec.algo_spec);

    let n = spec.n_pos + spec.n_neg;
    let mut rng = stream_rng(spec.seed, 1);
    let mut scores = Vec::with_capacity(n);
    let mut reader_correct = vec![Vec::with_capacity(n); spec.n_readers];
    for k in 0..n {
        let positive = k < spec.n_pos;
        let u: f64 = sigma * rng.sample::<f64, _>(StandardNormal);
        let z_alg = if positive { z_algo_sens } else { z_algo_spec };
        let p_alg = clamp_probability(normal.cdf(z_alg + u));
        let latent = normal.inverse_cdf(p_alg) + rng.sample::<f64, _>(StandardNormal);
        scores.push(if positive {
            logistic(latent)
        } else {
            logistic(-latent)
        });
        let z = if positive { &z_sens } else { &z_spec };
        for (j, row) in reader_correct.iter_mut().enumerate() {
            let p = clamp_probability(normal.cdf(z[j] + u));
            row.push(rng.random::<f64>() < p);
        }
    }
    Ok(PanelDraw {
        truth: PanelTruth {
            model: MODEL_NAME.into(),
            reader_sensitivity,
            reader_specificity,
            algo_sensitivity: spec.algo_sens,
            algo_specificity: spec.algo_spec,
            case_difficulty_spread: sigma,
        },
        scores,
        reader_correct,
    })
}

impl PanelSpec {
    pub fn reader_id(&self, j: usize) -> String {
        format!("{}{:02}", self.reader_prefix, j + 1)
    }
}

/// Synthetic cohort plus the reader accuracies that generated it.
pub fn generate_panel_with_truth(spec: &PanelSpec) -> Result<(Cohort, PanelTruth), SynthError> {
    let draw = draw_panel(spec)?;
    let n = draw.scores.len();
    let case_id = |k: usize| format!("{}-{:06}", spec.dataset, k + 1);
    let mut cases: Vec<CaseRecord> = (0..n)
        .map(|k| {
            CaseRecord::new(
                case_id(k),
                spec.dataset.clone(),
                Label::from_bool(k < spec.n_pos),
                draw.scores[k],
            )
        })
        .collect();
    if spec.attributes {
        draw_attributes(spec.seed, &mut cases);
    }
    let readers: Vec<ReaderInfo> = (0..spec.n_readers)
        .map(|j| ReaderInfo::new(spec.reader_id(j), spec.reader_tag))
        .collect();
    let mut reads = Vec::with_capacity(n * spec.n_readers);
    for (j, row) in draw.reader_correct.iter().enumerate() {
        for (k, &correct) in row.iter().enumerate() {
            let positive = k < spec.n_pos;
            reads.push(ReaderRead::new(
                case_id(k),
                spec.reader_id(j),
                Label::from_bool(positive == correct),
            ));
        }
    }
    let cohort = Cohort::new(cases, reads, readers)?;
    Ok((cohort, draw.truth))
}

/// Attribute draws on stream 2; reader and score draws are unaffected.
/// HIV status is missing for 5% of cases.
fn draw_attributes(seed: u64, cases: &mut [CaseRecord]) {
    let mut rng = stream_rng(seed, 2);
    for case in cases {
        let positive = case.tb_label.is_positive();
        let status = |p: bool| {
            if p {
                Status::Positive
            } else {
                Status::Negative
            }
        };
        case.age = Some(rng.random_range(18..=80));
        case.sex = Some(if rng.random_bool(0.5) {
            Sex::Female
        } else {
            Sex::Male
        });
        let hiv = status(rng.random_bool(0.15));
        case.hiv_status = (!rng.random_bool(0.05)).then_some(hiv);
        case.smear_status = Some(status(positive && rng.random_bool(0.6)));
        case.tb_history = Some(rng.random_bool(0.2));
        for symptom in Symptom::WHO_FOUR {
            case.symptoms
                .insert(symptom, rng.random_bool(if positive { 0.6 } else { 0.3 }));
        }
        let other: f64 = rng.random();
        case.dls_abnormal_score = Some(if positive {
            case.dls_tb_score.max(other)
        } else {
            other
        });
    }
}

/// Several panels as one cohort. Panels naming the same dataset must agree
/// on `n_pos` and `n_neg`; the first supplies the cases and scores and the
/// rest contribute reads only, so their readers are independent of the
/// algorithm given the truth.
pub fn generate_study(panels: &[PanelSpec]) -> Result<(Cohort, Vec<PanelTruth>), SynthError> {
    let mut by_dataset: Vec<(String, Cohort)> = Vec::new();
    let mut truths = Vec::with_capacity(panels.len());
    for spec in panels {
        let (cohort, truth) = generate_panel_with_truth(spec)?;
        truths.push(truth);
        match by_dataset.iter_mut().find(|(d, _)| *d == spec.dataset) {
            None => by_dataset.push((spec.dataset.clone(), cohort)),
            Some((_, base)) => {
                if base.n_positive() != spec.n_pos || base.n_negative() != spec.n_neg {
                    return Err(SynthError::InvalidSpec(format!(
                        "panels for dataset `{}` disagree on case counts",
                        spec.dataset
                    )));
                }
                let mut reads = std::mem::take(&mut base.reads);
                reads.extend(cohort.reads);
                let mut readers = std::mem::take(&mut base.readers);
                readers.extend(cohort.readers);
                *base = Cohort::new(std::mem::take(&mut base.cases), reads, readers)?;
            }
        }
    }
    let cohorts: Vec<Cohort> = by_dataset.into_iter().map(|(_, c)| c).collect();
    Ok((combine_datasets(&cohorts)?, truths))
}

pub fn generate_panel(spec: &PanelSpec) -> Result<Cohort, SynthError> {
    generate_panel_with_truth(spec).map(|(c, _)| c)
}

/// Correctness matrix of a synthetic panel on `endpoint` without building
/// the cohort. Identical to thresholding the generated cohort at 0.5.
pub fn panel_matrix(spec: &PanelSpec, endpoint: Endpoint) -> Result<CorrectnessMatrix, SynthError> {
    let draw = draw_panel(spec)?;
    let range = match endpoint {
        Endpoint::Sensitivity => 0..spec.n_pos,
        Endpoint::Specificity => spec.n_pos..draw.scores.len(),
    };
    let positive = endpoint == Endpoint::Sensitivity;
    let mut rows = Vec::with_capacity(spec.n_readers + 1);
    rows.push(
        draw.scores[range.clone()]
            .iter()
            .map(|&s| u8::from((s >= ALGORITHM_THRESHOLD) == positive))
            .collect(),
    );
    for row in &draw.reader_correct {
        rows.push(row[range.clone()].iter().map(|&c| u8::from(c)).collect());
    }
    Ok(CorrectnessMatrix::from_rows(endpoint, rows)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub endpoint: Endpoint,
    pub n_trials: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
    pub alpha: f64,
    pub master_seed: u64,
    pub model: String,
}

/// Fraction of trials in which the noninferiority test rejects at `alpha`.
/// Trial `i` uses seed `derive_seed(spec.seed, i)`.
pub fn calibrate_type1(
    spec: &PanelSpec,
    config: &NoninferiorityConfig,
    endpoint: Endpoint,
    n_trials: usize,
    alpha: f64,
) -> Result<CalibrationReport, SynthError> {
    spec.validate()?;
    let test_config = NoninferiorityConfig {
        alpha,
        alpha_primary: alpha,
        ..*config
    };
    let rejected: Vec<bool> = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let trial = PanelSpec {
                seed: derive_seed(spec.seed, i as u64),
                ..spec.clone()
            };
            let m = panel_matrix(&trial, endpoint)?;
            let r = mrmc_orh_test(&m, &test_config, TestStage::Secondary)?;
            Ok(r.p_noninferiority < alpha)
        })
        .collect::<Result<_, SynthError>>()?;
    let rejections = rejected.iter().filter(|&&r| r).count();
    Ok(CalibrationReport {
        endpoint,
        n_trials,
        rejections,
        rejection_rate: if n_trials == 0 {
            0.0
        } else {
            rejections as f64 / n_trials as f64
        },
        alpha,
        master_seed: spec.seed,
        model: MODEL_NAME.into(),
    })
}
