//! Replayable analysis operations. Every number in a bundle is produced by
//! evaluating an [`Operation`] and reading one field of its JSON output, so
//! the manifest can re-derive it from the inputs alone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use super::ReportError;
use crate::cohort::{reader_positive_rates, validate, Cohort};
use crate::cost::{evaluate_cost, CostInputs};
use crate::inference::{
    correctness_matrix, ks_two_sample, mcnemar_exact, mrmc_orh_test, wald_noninferiority_paired,
    Endpoint, NoninferiorityConfig, PairedCounts, TestStage,
};
use crate::operating_point::{
    match_individual_reader, match_mean_reader, mean_on_axis, prespecified, sens_at_spec,
    spec_at_sens, MatchAxis, OperatingPoint,
};
use crate::roc::{
    auc_of, auc_statistic, bootstrap_ci, roc_curve, sensitivity_at, specificity_at,
    BootstrapConfig, PerformancePoint, Scored,
};
use crate::subgroup::{
    abnormality_eval, stratify, technical_issue_groups, AbnormalityMode, StratumSpec,
};

/// Which cases an operation sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub datasets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<Filter>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filter {
    Stratum(StratumSpec),
    TechnicalIssue(String),
}

impl Selection {
    pub fn datasets(datasets: Vec<String>) -> Self {
        Selection {
            datasets,
            filter: None,
        }
    }

    pub fn with_filter(&self, filter: Filter) -> Self {
        Selection {
            datasets: self.datasets.clone(),
            filter: Some(filter),
        }
    }

    pub fn apply(&self, cohort: &Cohort) -> Result<Cohort, ReportError> {
        let base = cohort.filter_cases(|c| self.datasets.contains(&c.dataset));
        Ok(match &self.filter {
            None => base,
            Some(Filter::Stratum(spec)) => stratify(&base, spec).cohort,
            Some(Filter::TechnicalIssue(label)) => technical_issue_groups(&base)
                .into_iter()
                .find(|(l, _)| l == label)
                .map(|(_, c)| c)
                .ok_or_else(|| {
                    ReportError::Config(format!("unknown technical-issue group `{label}`"))
                })?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slice {
    All,
    Positive,
    Negative,
}

impl Slice {
    pub const ALL: [Slice; 3] = [Slice::All, Slice::Positive, Slice::Negative];

    pub fn as_str(self) -> &'static str {
        match self {
            Slice::All => "all",
            Slice::Positive => "positive",
            Slice::Negative => "negative",
        }
    }

    pub fn scores(self, cohort: &Cohort) -> Vec<f64> {
        cohort
            .cases
            .iter()
            .filter(|c| match self {
                Slice::All => true,
                Slice::Positive => c.tb_label.is_positive(),
                Slice::Negative => !c.tb_label.is_positive(),
            })
            .map(|c| c.dls_tb_score)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Value { value: f64 },
    MeanReader { readers: Vec<String> },
    Reader { reader: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdSpec {
    Fixed {
        value: f64,
    },
    /// Meet `target` on `axis`, maximizing the other axis.
    Matched {
        axis: MatchAxis,
        target: Target,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootStatistic {
    Auc,
    Sensitivity,
    Specificity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Operation {
    Validate,
    Count {
        selection: Selection,
    },
    Roc {
        selection: Selection,
    },
    Auc {
        selection: Selection,
    },
    Bootstrap {
        selection: Selection,
        statistic: BootStatistic,
        threshold: Option<f64>,
        config: BootstrapConfig,
    },
    Performance {
        selection: Selection,
        threshold: ThresholdSpec,
    },
    ReaderPerformance {
        selection: Selection,
        reader: String,
    },
    ReaderMean {
        selection: Selection,
        readers: Vec<String>,
        axis: MatchAxis,
    },
    Mrmc {
        selection: Selection,
        readers: Vec<String>,
        endpoint: Endpoint,
        threshold: ThresholdSpec,
        config: NoninferiorityConfig,
        stage: TestStage,
    },
    Paired {
        selection: Selection,
        reader: String,
        endpoint: Endpoint,
        threshold: ThresholdSpec,
        margin: f64,
    },
    Ks {
        a: Selection,
        b: Selection,
        slice: Slice,
    },
    SliceSummary {
        selection: Selection,
        slice: Slice,
    },
    Histogram {
        selection: Selection,
        slice: Slice,
        bin_width: f64,
    },
    Cost {
        inputs: CostInputs,
    },
    ReaderRates,
    Stratum {
        selection: Selection,
        spec: StratumSpec,
    },
    Abnormality {
        selection: Selection,
        ground_truth: Vec<String>,
        k: usize,
        mode: AbnormalityMode,
    },
}

/// Each listed reader's performance on the cases of `cohort` they read.
pub fn reader_performance(cohort: &Cohort, reader: &str) -> Result<PerformancePoint, ReportError> {
    let labels: BTreeMap<&str, bool> = cohort
        .cases
        .iter()
        .map(|c| (c.case_id.as_str(), c.tb_label.is_positive()))
        .collect();
    let (mut tp, mut n_pos, mut tn, mut n_neg) = (0, 0, 0, 0);
    for read in cohort.reads.iter().filter(|r| r.reader_id == reader) {
        let Some(&positive) = labels.get(read.case_id.as_str()) else {
            continue;
        };
        let called = read.tb_call.is_positive();
        if positive {
            n_pos += 1;
            tp += usize::from(called);
        } else {
            n_neg += 1;
            tn += usize::from(!called);
        }
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(ReportError::Data(format!(
            "reader `{reader}` has no reads on one of the classes"
        )));
    }
    Ok(PerformancePoint::from_counts(tp, n_pos, tn, n_neg, None))
}

pub fn resolve_threshold(
    cohort: &Cohort,
    spec: &ThresholdSpec,
) -> Result<OperatingPoint, ReportError> {
    let data = cohort.scored();
    Ok(match spec {
        ThresholdSpec::Fixed { value } => prespecified(&data, *value)?,
        ThresholdSpec::Matched { axis, target } => match target {
            Target::Value { value } => match axis {
                MatchAxis::Sensitivity => spec_at_sens(&data, *value)?,
                MatchAxis::Specificity => sens_at_spec(&data, *value)?,
            },
            Target::MeanReader { readers } => {
                let panel = readers
                    .iter()
                    .map(|r| reader_performance(cohort, r))
                    .collect::<Result<Vec<_>, _>>()?;
                match_mean_reader(&data, &panel, *axis)?
            }
            Target::Reader { reader } => {
                match_individual_reader(&data, &reader_performance(cohort, reader)?, *axis)?
            }
        },
    })
}

fn summary(scores: &[f64]) -> Json {
    let n = scores.len();
    let mean = (n > 0).then(|| scores.iter().sum::<f64>() / n as f64);
    let sd = mean
        .filter(|_| n > 1)
        .map(|m| (scores.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    json!({ "n": n, "mean": mean, "sd": sd })
}

/// Bin counts over `[0, 1]`; the last bin is closed.
pub fn histogram(scores: &[f64], bin_width: f64) -> Vec<usize> {
    let n_bins = (1.0 / bin_width - 1e-9).ceil() as usize;
    let mut counts = vec![0; n_bins];
    for &s in scores {
        let bin = ((s / bin_width + 1e-9).floor() as usize).min(n_bins - 1);
        counts[bin] += 1;
    }
    counts
}

fn to_json<T: Serialize>(v: &T) -> Result<Json, ReportError> {
    serde_json::to_value(v).map_err(|e| ReportError::Data(e.to_string()))
}

fn scored_of(cohort: &Cohort) -> Scored {
    cohort.scored()
}

impl Operation {
    /// Run the operation on the full cohort (exclusions applied).
    pub fn evaluate(&self, cohort: &Cohort) -> Result<Json, ReportError> {
        match self {
            Operation::Validate => to_json(&validate(cohort)),
            Operation::Count { selection } => {
                let c = selection.apply(cohort)?;
                Ok(json!({
                    "n_cases": c.cases.len(),
                    "n_positive": c.n_positive(),
                    "n_negative": c.n_negative(),
                }))
            }
            Operation::Roc { selection } => {
                to_json(&roc_curve(&scored_of(&selection.apply(cohort)?))?)
            }
            Operation::Auc { selection } => {
                Ok(json!({ "auc": auc_of(&scored_of(&selection.apply(cohort)?))? }))
            }
            Operation::Bootstrap {
                selection,
                statistic,
                threshold,
                config,
            } => {
                let data = scored_of(&selection.apply(cohort)?);
                let t = || {
                    threshold.ok_or_else(|| {
                        ReportError::Config("bootstrap of a rate needs a threshold".into())
                    })
                };
                let ci = match statistic {
                    BootStatistic::Auc => bootstrap_ci(auc_statistic, &data, config)?,
                    BootStatistic::Sensitivity => {
                        bootstrap_ci(sensitivity_at(t()?), &data, config)?
                    }
                    BootStatistic::Specificity => {
                        bootstrap_ci(specificity_at(t()?), &data, config)?
                    }
                };
                to_json(&ci)
            }
            Operation::Performance {
                selection,
                threshold,
            } => to_json(&resolve_threshold(&selection.apply(cohort)?, threshold)?),
            Operation::ReaderPerformance { selection, reader } => {
                to_json(&reader_performance(&selection.apply(cohort)?, reader)?)
            }
            Operation::ReaderMean {
                selection,
                readers,
                axis,
            } => {
                let c = selection.apply(cohort)?;
                let panel = readers
                    .iter()
                    .map(|r| reader_performance(&c, r))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(json!({ "mean": mean_on_axis(&panel, *axis) }))
            }
            Operation::Mrmc {
                selection,
                readers,
                endpoint,
                threshold,
                config,
                stage,
            } => {
                let c = selection.apply(cohort)?;
                let t = resolve_threshold(&c, threshold)?.threshold;
                let m = correctness_matrix(&c, readers, *endpoint, t)?;
                let r = mrmc_orh_test(&m, config, *stage)?;
                let mut doc = to_json(&r.document())?;
                doc["threshold"] = json!(t);
                doc["n_readers"] = json!(r.n_readers);
                doc["n_cases"] = json!(r.n_cases);
                Ok(doc)
            }
            Operation::Paired {
                selection,
                reader,
                endpoint,
                threshold,
                margin,
            } => {
                let c = selection.apply(cohort)?;
                let t = resolve_threshold(&c, threshold)?.threshold;
                let m = correctness_matrix(&c, std::slice::from_ref(reader), *endpoint, t)?;
                let counts: PairedCounts = m.paired_counts(1);
                let wald = wald_noninferiority_paired(&counts, *margin)?;
                Ok(json!({
                    "threshold": t,
                    "counts": counts,
                    "wald": wald,
                    "mcnemar_p": mcnemar_exact(&counts),
                }))
            }
            Operation::Ks { a, b, slice } => {
                let sa = slice.scores(&a.apply(cohort)?);
                let sb = slice.scores(&b.apply(cohort)?);
                to_json(&ks_two_sample(&sa, &sb)?)
            }
            Operation::SliceSummary { selection, slice } => {
                Ok(summary(&slice.scores(&selection.apply(cohort)?)))
            }
            Operation::Histogram {
                selection,
                slice,
                bin_width,
            } => Ok(
                json!({ "counts": histogram(&slice.scores(&selection.apply(cohort)?), *bin_width) }),
            ),
            Operation::Cost { inputs } => to_json(&evaluate_cost(inputs)?),
            Operation::ReaderRates => to_json(&reader_positive_rates(&cohort.with_all_readers())),
            Operation::Stratum { selection, spec } => {
                let s = stratify(&selection.apply(cohort)?, spec);
                Ok(json!({
                    "n_cases": s.n_cases,
                    "n_unknown": s.n_unknown,
                    "suppressed": s.suppressed,
                }))
            }
            Operation::Abnormality {
                selection,
                ground_truth,
                k,
                mode,
            } => {
                let data = abnormality_eval(&selection.apply(cohort)?, ground_truth, *k, *mode)?;
                Ok(json!({
                    "n_cases": data.len(),
                    "n_positive": data.n_pos(),
                    "auc": auc_of(&data)?,
                }))
            }
        }
    }
}

/// Escape one JSON-pointer reference token.
pub fn pointer_token(s: &str) -> String {
    s.replace('~', "~0").replace('/', "~1")
}
