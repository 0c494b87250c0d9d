//! Case stratification, technical-issue grouping and the combined
//! TB-or-abnormal evaluation.
//!
//! Predicates use three-valued logic: a case whose relevant attribute is
//! missing (or recorded as `unknown`) evaluates to `None`, is left out of the
//! stratum and is counted in [`Stratum::n_unknown`].

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{quantile_linear, CaseRecord, Cohort, Sex, Status, Symptom};
use crate::roc::Scored;

#[derive(Debug, Error)]
pub enum SubgroupError {
    #[error("invalid stratum `{name}`: {message}")]
    InvalidSpec { name: String, message: String },
    #[error("k must be 1, 2 or 3, got {0}")]
    InvalidK(usize),
    #[error("dls_abnormal_score missing on {} case(s): {}", .0.len(), .0.join(", "))]
    MissingAbnormalScore(Vec<String>),
    #[error("fewer than 3 ground-truth abnormal calls on {} case(s): {}", .0.len(), .0.join(", "))]
    TooFewGroundTruthReads(Vec<String>),
}

/// Case attribute or per-case read aggregate a predicate can test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    Dataset,
    TbLabel,
    Age,
    Sex,
    HivStatus,
    SmearStatus,
    TbHistory,
    Symptom(Symptom),
    /// Distinct non-excluded readers who flagged a technical issue.
    TechnicalIssueCount,
    DlsTbScore,
    DlsAbnormalScore,
}

impl Field {
    pub fn name(self) -> &'static str {
        match self {
            Field::Dataset => "dataset",
            Field::TbLabel => "tb_label",
            Field::Age => "age",
            Field::Sex => "sex",
            Field::HivStatus => "hiv_status",
            Field::SmearStatus => "smear_status",
            Field::TbHistory => "tb_history",
            Field::Symptom(s) => s.as_str(),
            Field::TechnicalIssueCount => "technical_issue_count",
            Field::DlsTbScore => "dls_tb_score",
            Field::DlsAbnormalScore => "dls_abnormal_score",
        }
    }
}

impl FromStr for Field {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "dataset" => Field::Dataset,
            "tb_label" => Field::TbLabel,
            "age" => Field::Age,
            "sex" => Field::Sex,
            "hiv_status" => Field::HivStatus,
            "smear_status" => Field::SmearStatus,
            "tb_history" => Field::TbHistory,
            "technical_issue_count" => Field::TechnicalIssueCount,
            "dls_tb_score" => Field::DlsTbScore,
            "dls_abnormal_score" => Field::DlsAbnormalScore,
            other => Field::Symptom(
                other
                    .parse()
                    .map_err(|_| format!("unknown field `{other}`"))?,
            ),
        })
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Field {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Field {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Num(f64),
    Text(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Num(x) => write!(f, "{x}"),
            Value::Text(s) => f.write_str(s),
        }
    }
}

impl Value {
    fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            Value::Num(x) if *x == 1.0 => Some(true),
            Value::Num(x) if *x == 0.0 => Some(false),
            Value::Text(s) => match s.as_str() {
                "true" | "positive" | "yes" | "1" => Some(true),
                "false" | "negative" | "no" | "0" => Some(false),
                _ => None,
            },
            _ => None,
        }
    }

    fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(x) => Some(*x),
            Value::Text(s) => s.parse().ok(),
            Value::Bool(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompareOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=", alias = "≠")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=", alias = "≥")]
    Ge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    True,
    Compare {
        field: Field,
        op: CompareOp,
        value: Value,
    },
    In {
        field: Field,
        values: Vec<Value>,
    },
    /// Any of the listed boolean fields is true.
    AnyOf {
        fields: Vec<Field>,
    },
    All {
        parts: Vec<Predicate>,
    },
}

/// Observed value of `field`, normalized to a [`Value`].
fn field_value(case: &CaseRecord, field: Field, tech: &HashMap<&str, usize>) -> Option<Value> {
    let status = |s: Option<Status>| match s {
        Some(Status::Positive) => Some(Value::Text("positive".into())),
        Some(Status::Negative) => Some(Value::Text("negative".into())),
        Some(Status::Unknown) | None => None,
    };
    match field {
        Field::Dataset => Some(Value::Text(case.dataset.clone())),
        Field::TbLabel => Some(Value::Bool(case.tb_label.is_positive())),
        Field::Age => case.age.map(|a| Value::Num(f64::from(a))),
        Field::Sex => match case.sex {
            Some(Sex::Female) => Some(Value::Text("female".into())),
            Some(Sex::Male) => Some(Value::Text("male".into())),
            Some(Sex::Unknown) | None => None,
        },
        Field::HivStatus => status(case.hiv_status),
        Field::SmearStatus => status(case.smear_status),
        Field::TbHistory => case.tb_history.map(Value::Bool),
        Field::Symptom(s) => case.symptom(s).map(Value::Bool),
        Field::TechnicalIssueCount => Some(Value::Num(
            tech.get(case.case_id.as_str()).copied().unwrap_or(0) as f64,
        )),
        Field::DlsTbScore => Some(Value::Num(case.dls_tb_score)),
        Field::DlsAbnormalScore => case.dls_abnormal_score.map(Value::Num),
    }
}

fn values_equal(observed: &Value, wanted: &Value) -> bool {
    match observed {
        Value::Bool(b) => wanted.as_bool() == Some(*b),
        Value::Num(x) => wanted.as_num() == Some(*x),
        Value::Text(s) => matches!(wanted, Value::Text(w) if w == s),
    }
}

impl Predicate {
    pub fn is_tautology(&self) -> bool {
        matches!(self, Predicate::True)
    }

    pub fn and(self, other: Predicate) -> Predicate {
        Predicate::All {
            parts: vec![self, other],
        }
    }

    /// `None` when a relevant attribute is unknown.
    pub fn eval(&self, case: &CaseRecord, tech: &HashMap<&str, usize>) -> Option<bool> {
        match self {
            Predicate::True => Some(true),
            Predicate::Compare { field, op, value } => {
                let observed = field_value(case, *field, tech)?;
                Some(match op {
                    CompareOp::Eq => values_equal(&observed, value),
                    CompareOp::Ne => !values_equal(&observed, value),
                    CompareOp::Lt | CompareOp::Ge => {
                        let (Some(x), Some(t)) = (observed.as_num(), value.as_num()) else {
                            return Some(false);
                        };
                        if *op == CompareOp::Lt {
                            x < t
                        } else {
                            x >= t
                        }
                    }
                })
            }
            Predicate::In { field, values } => {
                let observed = field_value(case, *field, tech)?;
                Some(values.iter().any(|v| values_equal(&observed, v)))
            }
            Predicate::AnyOf { fields } => {
                let mut unknown = false;
                for f in fields {
                    match field_value(case, *f, tech).and_then(|v| v.as_bool()) {
                        Some(true) => return Some(true),
                        Some(false) => {}
                        None => unknown = true,
                    }
                }
                if unknown {
                    None
                } else {
                    Some(false)
                }
            }
            Predicate::All { parts } => {
                let mut unknown = false;
                for p in parts {
                    match p.eval(case, tech) {
                        Some(false) => return Some(false),
                        Some(true) => {}
                        None => unknown = true,
                    }
                }
                if unknown {
                    None
                } else {
                    Some(true)
                }
            }
        }
    }

    fn check(&self, name: &str) -> Result<(), SubgroupError> {
        let invalid = |message: String| SubgroupError::InvalidSpec {
            name: name.to_string(),
            message,
        };
        match self {
            Predicate::Compare {
                field,
                op: CompareOp::Lt | CompareOp::Ge,
                value,
            } if value.as_num().is_none() => {
                Err(invalid(format!("ordering on `{field}` needs a number")))
            }
            Predicate::In { values, .. } if values.is_empty() => {
                Err(invalid("`in` needs at least one value".into()))
            }
            Predicate::AnyOf { fields } if fields.is_empty() => {
                Err(invalid("`any-of` needs at least one field".into()))
            }
            Predicate::AnyOf { fields } => match fields
                .iter()
                .find(|f| !matches!(f, Field::Symptom(_) | Field::TbHistory | Field::TbLabel))
            {
                Some(f) => Err(invalid(format!(
                    "`any-of` needs boolean fields, `{f}` is not"
                ))),
                None => Ok(()),
            },
            Predicate::All { parts } => parts.iter().try_for_each(|p| p.check(name)),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSpec {
    pub name: String,
    pub predicate: Predicate,
    pub min_cases: usize,
}

impl StratumSpec {
    pub fn new(
        name: impl Into<String>,
        predicate: Predicate,
        min_cases: usize,
    ) -> Result<Self, SubgroupError> {
        let spec = StratumSpec {
            name: name.into(),
            predicate,
            min_cases,
        };
        spec.predicate.check(&spec.name)?;
        Ok(spec)
    }
}

/// Flat config form: `field`, `op` and `value` or `values`. For `any-of`
/// the `values` are field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumConfig {
    pub name: String,
    #[serde(default)]
    pub field: Option<String>,
    pub op: String,
    #[serde(default)]
    pub value: Option<Value>,
    #[serde(default)]
    pub values: Vec<Value>,
    /// Falls back to the run-wide minimum when absent.
    #[serde(default)]
    pub min_cases: Option<usize>,
}

impl TryFrom<&StratumConfig> for StratumSpec {
    type Error = SubgroupError;

    fn try_from(c: &StratumConfig) -> Result<Self, Self::Error> {
        let invalid = |message: String| SubgroupError::InvalidSpec {
            name: c.name.clone(),
            message,
        };
        let field = || -> Result<Field, SubgroupError> {
            c.field
                .as_deref()
                .ok_or_else(|| invalid(format!("operator `{}` needs a field", c.op)))?
                .parse()
                .map_err(invalid)
        };
        let value = || {
            c.value
                .clone()
                .ok_or_else(|| invalid(format!("operator `{}` needs a value", c.op)))
        };
        let compare = |op| -> Result<Predicate, SubgroupError> {
            Ok(Predicate::Compare {
                field: field()?,
                op,
                value: value()?,
            })
        };
        let predicate = match c.op.as_str() {
            "true" | "all" => Predicate::True,
            "=" | "==" => compare(CompareOp::Eq)?,
            "!=" | "≠" => compare(CompareOp::Ne)?,
            "<" => compare(CompareOp::Lt)?,
            ">=" | "≥" => compare(CompareOp::Ge)?,
            "in" => Predicate::In {
                field: field()?,
                values: c.values.clone(),
            },
            "any-of" | "any_of" => Predicate::AnyOf {
                fields: c
                    .values
                    .iter()
                    .map(|v| v.to_string().parse::<Field>().map_err(invalid))
                    .collect::<Result<_, _>>()?,
            },
            other => return Err(invalid(format!("unknown operator `{other}`"))),
        };
        StratumSpec::new(c.name.clone(), predicate, c.min_cases.unwrap_or(0))
    }
}

/// Per case, the number of distinct non-excluded readers flagging a
/// technical issue. Cases without flags are absent.
pub fn technical_issue_counts(cohort: &Cohort) -> HashMap<&str, usize> {
    let mut flagged: HashMap<&str, HashSet<&str>> = HashMap::new();
    for read in cohort.active_reads().filter(|r| r.technical_issue) {
        flagged
            .entry(read.case_id.as_str())
            .or_default()
            .insert(read.reader_id.as_str());
    }
    flagged
        .into_iter()
        .map(|(case, readers)| (case, readers.len()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stratum {
    pub name: String,
    pub cohort: Cohort,
    pub n_cases: usize,
    /// Cases left out because a relevant attribute was unknown.
    pub n_unknown: usize,
    /// Fewer than `min_cases` cases; downstream analyses are skipped.
    pub suppressed: bool,
}

pub fn stratify(cohort: &Cohort, spec: &StratumSpec) -> Stratum {
    let tech = technical_issue_counts(cohort);
    let mut keep = HashSet::new();
    let mut n_unknown = 0;
    for case in &cohort.cases {
        match spec.predicate.eval(case, &tech) {
            Some(true) => {
                keep.insert(case.case_id.clone());
            }
            Some(false) => {}
            None => n_unknown += 1,
        }
    }
    let sub = cohort.filter_cases(|c| keep.contains(&c.case_id));
    let n_cases = sub.cases.len();
    Stratum {
        name: spec.name.clone(),
        cohort: sub,
        n_cases,
        n_unknown,
        suppressed: n_cases == 0 || n_cases < spec.min_cases,
    }
}

pub const TECHNICAL_ISSUE_GROUPS: [&str; 6] = ["0", "1", "2", ">=3", ">=1", ">=2"];

type CountTest = (&'static str, fn(usize) -> bool);

/// Exact-count groups 0, 1, 2 and >=3, then the cumulative >=1 and >=2.
pub fn technical_issue_groups(cohort: &Cohort) -> Vec<(String, Cohort)> {
    let tech = technical_issue_counts(cohort);
    let count = |c: &CaseRecord| tech.get(c.case_id.as_str()).copied().unwrap_or(0);
    let tests: [CountTest; 6] = [
        ("0", |n| n == 0),
        ("1", |n| n == 1),
        ("2", |n| n == 2),
        (">=3", |n| n >= 3),
        (">=1", |n| n >= 1),
        (">=2", |n| n >= 2),
    ];
    tests
        .iter()
        .map(|(label, test)| (label.to_string(), cohort.filter_cases(|c| test(count(c)))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbnormalityMode {
    /// Positive if TB-positive or `k` ground-truth readers call abnormal;
    /// scored by the sum of the TB and abnormality scores.
    TbOrAbnormal,
    /// TB-positive cases removed; positive if `k` readers call abnormal.
    AbnormalOnly,
}

/// Scores and labels for the combined abnormality evaluation.
/// Votes count only the designated `ground_truth` readers.
pub fn abnormality_eval(
    cohort: &Cohort,
    ground_truth: &[String],
    k: usize,
    mode: AbnormalityMode,
) -> Result<Scored, SubgroupError> {
    if !(1..=3).contains(&k) {
        return Err(SubgroupError::InvalidK(k));
    }
    let designated: BTreeSet<&str> = ground_truth.iter().map(String::as_str).collect();
    let mut votes: HashMap<&str, (usize, usize)> = HashMap::new();
    for read in &cohort.reads {
        if designated.contains(read.reader_id.as_str()) {
            if let Some(abnormal) = read.abnormal_call {
                let entry = votes.entry(read.case_id.as_str()).or_default();
                entry.0 += 1;
                entry.1 += usize::from(abnormal);
            }
        }
    }
    let included: Vec<&CaseRecord> = cohort
        .cases
        .iter()
        .filter(|c| mode == AbnormalityMode::TbOrAbnormal || !c.tb_label.is_positive())
        .collect();
    let missing_score: Vec<String> = included
        .iter()
        .filter(|c| c.dls_abnormal_score.is_none())
        .map(|c| c.case_id.clone())
        .collect();
    if !missing_score.is_empty() {
        return Err(SubgroupError::MissingAbnormalScore(missing_score));
    }
    let short: Vec<String> = included
        .iter()
        .filter(|c| votes.get(c.case_id.as_str()).map_or(0, |v| v.0) < 3)
        .map(|c| c.case_id.clone())
        .collect();
    if !short.is_empty() {
        return Err(SubgroupError::TooFewGroundTruthReads(short));
    }
    let mut scores = Vec::with_capacity(included.len());
    let mut labels = Vec::with_capacity(included.len());
    for case in included {
        let abnormal = votes[case.case_id.as_str()].1 >= k;
        let extra = case.dls_abnormal_score.unwrap_or_default();
        match mode {
            AbnormalityMode::TbOrAbnormal => {
                scores.push(case.dls_tb_score + extra);
                labels.push(case.tb_label.is_positive() || abnormal);
            }
            AbnormalityMode::AbnormalOnly => {
                scores.push(extra);
                labels.push(abnormal);
            }
        }
    }
    Ok(Scored::new(scores, labels))
}

/// Age bands `[e_i, e_{i+1})` over the given edges, open at both ends.
pub fn age_bands_with_edges(edges: &[f64], min_cases: usize) -> Vec<StratumSpec> {
    let mut edges: Vec<f64> = edges.to_vec();
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    let age_cmp = |op, t: f64| Predicate::Compare {
        field: Field::Age,
        op,
        value: Value::Num(t),
    };
    let Some((&first, &last)) = edges.first().zip(edges.last()) else {
        return vec![StratumSpec {
            name: "age:all".into(),
            predicate: age_cmp(CompareOp::Ge, f64::NEG_INFINITY),
            min_cases,
        }];
    };
    let mut bands = vec![StratumSpec {
        name: format!("age<{first}"),
        predicate: age_cmp(CompareOp::Lt, first),
        min_cases,
    }];
    for w in edges.windows(2) {
        bands.push(StratumSpec {
            name: format!("{}<=age<{}", w[0], w[1]),
            predicate: age_cmp(CompareOp::Ge, w[0]).and(age_cmp(CompareOp::Lt, w[1])),
            min_cases,
        });
    }
    bands.push(StratumSpec {
        name: format!("age>={last}"),
        predicate: age_cmp(CompareOp::Ge, last),
        min_cases,
    });
    bands
}

/// Bands at the observed age deciles.
pub fn age_bands(cohort: &Cohort, min_cases: usize) -> Vec<StratumSpec> {
    let mut ages: Vec<f64> = cohort
        .cases
        .iter()
        .filter_map(|c| c.age.map(f64::from))
        .collect();
    if ages.is_empty() {
        return Vec::new();
    }
    ages.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (1..10)
        .map(|i| quantile_linear(&ages, i as f64 / 10.0).round())
        .collect();
    age_bands_with_edges(&edges, min_cases)
}

/// Any of cough, weight loss, fever or night sweats.
pub fn who_symptom_screen(min_cases: usize) -> StratumSpec {
    StratumSpec {
        name: "who_four_symptom".into(),
        predicate: Predicate::AnyOf {
            fields: Symptom::WHO_FOUR
                .iter()
                .map(|&s| Field::Symptom(s))
                .collect(),
        },
        min_cases,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{CohortTag, Label, ReaderInfo, ReaderRead};
    use proptest::prelude::*;

    fn case(id: usize, positive: bool) -> CaseRecord {
        CaseRecord::new(
            format!("c{id}"),
            "d",
            Label::from_bool(positive),
            0.1 * (id % 10) as f64,
        )
    }

    fn readers(n: usize) -> Vec<ReaderInfo> {
        (0..n)
            .map(|j| ReaderInfo::new(format!("r{j}"), CohortTag::UsBased))
            .collect()
    }

    fn empty_reads_cohort(cases: Vec<CaseRecord>) -> Cohort {
        Cohort::new(cases, Vec::new(), readers(1)).unwrap()
    }

    #[test]
    fn hiv_stratum() {
        let mut cases: Vec<CaseRecord> = (0..8).map(|i| case(i, i % 2 == 0)).collect();
        for (i, c) in cases.iter_mut().enumerate() {
            c.hiv_status = Some(match i {
                0..=2 => Status::Positive,
                3..=5 => Status::Negative,
                _ => Status::Unknown,
            });
        }
        cases[7].hiv_status = None;
        let cohort = empty_reads_cohort(cases);
        let spec = StratumSpec::new(
            "hiv+",
            Predicate::Compare {
                field: Field::HivStatus,
                op: CompareOp::Eq,
                value: Value::Text("positive".into()),
            },
            0,
        )
        .unwrap();
        let s = stratify(&cohort, &spec);
        assert_eq!(s.n_cases, 3);
        assert_eq!(s.n_unknown, 2);
        assert!(!s.suppressed);
        let s = stratify(
            &cohort,
            &StratumSpec {
                min_cases: 4,
                ..spec
            },
        );
        assert!(s.suppressed);
    }

    #[test]
    fn four_symptom_screen_matches_direct_filter() {
        let mut cases: Vec<CaseRecord> = (0..6).map(|i| case(i, true)).collect();
        for c in cases.iter_mut() {
            for s in Symptom::WHO_FOUR {
                c.symptoms.insert(s, false);
            }
        }
        cases[1].symptoms.insert(Symptom::Fever, true);
        cases[2].symptoms.insert(Symptom::NightSweats, true);
        cases[3].symptoms.insert(Symptom::ChestPain, true);
        cases[4].symptoms.remove(&Symptom::Cough);
        cases[5].symptoms.remove(&Symptom::Cough);
        cases[5].symptoms.insert(Symptom::WeightLoss, true);
        let cohort = empty_reads_cohort(cases);
        let s = stratify(&cohort, &who_symptom_screen(0));
        let ids: Vec<&str> = s.cohort.cases.iter().map(|c| c.case_id.as_str()).collect();
        assert_eq!(ids, ["c1", "c2", "c5"]);
        // c4: cough unknown, all others negative.
        assert_eq!(s.n_unknown, 1);
    }

    #[test]
    fn tautology_is_identity() {
        let cohort = empty_reads_cohort((0..5).map(|i| case(i, i < 2)).collect());
        let s = stratify(
            &cohort,
            &StratumSpec::new("all", Predicate::True, 0).unwrap(),
        );
        assert_eq!(s.cohort, cohort);
    }

    fn flag(case: &str, reader: &str) -> ReaderRead {
        let mut r = ReaderRead::new(case, reader, Label::Negative);
        r.technical_issue = true;
        r
    }

    #[test]
    fn technical_issue_grouping() {
        let cases: Vec<CaseRecord> = (0..4).map(|i| case(i, false)).collect();
        let reads = vec![
            flag("c0", "r0"),
            flag("c0", "r1"),
            flag("c0", "r2"),
            flag("c1", "r3"),
            ReaderRead::new("c2", "r0", Label::Negative),
        ];
        let cohort = Cohort::new(cases, reads, readers(4)).unwrap();
        let groups: BTreeMap<String, Vec<String>> = technical_issue_groups(&cohort)
            .into_iter()
            .map(|(l, c)| (l, c.cases.into_iter().map(|c| c.case_id).collect()))
            .collect();
        assert_eq!(groups[">=3"], ["c0"]);
        assert_eq!(groups[">=2"], ["c0"]);
        assert_eq!(groups[">=1"], ["c0", "c1"]);
        assert_eq!(groups["1"], ["c1"]);
        assert!(groups["2"].is_empty());
        assert_eq!(groups["0"], ["c2", "c3"]);

        let excluded = cohort.exclude_readers([&"r3".to_string()]).unwrap();
        let groups = technical_issue_groups(&excluded);
        assert_eq!(
            groups[0].1.cases.len(),
            3,
            "flag from an excluded reader counts 0"
        );
    }

    use std::collections::BTreeMap;

    #[test]
    fn no_flags_all_in_group_zero() {
        let cohort = empty_reads_cohort((0..3).map(|i| case(i, false)).collect());
        let groups = technical_issue_groups(&cohort);
        assert_eq!(groups[0].1.cases.len(), 3);
        assert!(groups[1..].iter().all(|(_, c)| c.cases.is_empty()));
    }

    fn abnormal_fixture() -> (Cohort, Vec<String>) {
        let mut cases = vec![case(0, true), case(1, false), case(2, false)];
        for c in cases.iter_mut() {
            c.dls_abnormal_score = Some(0.9);
        }
        let votes = [
            [false, false, false],
            [true, true, false],
            [false, false, false],
        ];
        let mut reads = Vec::new();
        for (k, v) in votes.iter().enumerate() {
            for (j, &a) in v.iter().enumerate() {
                let mut r = ReaderRead::new(format!("c{k}"), format!("r{j}"), Label::Negative);
                r.abnormal_call = Some(a);
                reads.push(r);
            }
        }
        let gt = vec!["r0".to_string(), "r1".to_string(), "r2".to_string()];
        (Cohort::new(cases, reads, readers(3)).unwrap(), gt)
    }

    #[test]
    fn abnormality_votes() {
        let (cohort, gt) = abnormal_fixture();
        let s3 = abnormality_eval(&cohort, &gt, 3, AbnormalityMode::TbOrAbnormal).unwrap();
        assert_eq!(s3.labels, [true, false, false]);
        assert!((s3.scores[0] - 0.9).abs() < 1e-12);
        let s2 = abnormality_eval(&cohort, &gt, 2, AbnormalityMode::TbOrAbnormal).unwrap();
        assert_eq!(s2.labels, [true, true, false]);
        let only = abnormality_eval(&cohort, &gt, 2, AbnormalityMode::AbnormalOnly).unwrap();
        assert_eq!(only.labels, [true, false]);
        assert_eq!(only.scores, [0.9, 0.9]);
        assert!(matches!(
            abnormality_eval(&cohort, &gt, 0, AbnormalityMode::AbnormalOnly),
            Err(SubgroupError::InvalidK(0))
        ));
    }

    #[test]
    fn abnormality_errors_list_cases() {
        let (cohort, gt) = abnormal_fixture();
        let err =
            abnormality_eval(&cohort, &gt[..2], 1, AbnormalityMode::TbOrAbnormal).unwrap_err();
        match err {
            SubgroupError::TooFewGroundTruthReads(cases) => assert_eq!(cases, ["c0", "c1", "c2"]),
            other => panic!("{other}"),
        }
        let mut broken = cohort.clone();
        broken.cases[1].dls_abnormal_score = None;
        assert!(matches!(
            abnormality_eval(&broken, &gt, 1, AbnormalityMode::TbOrAbnormal),
            Err(SubgroupError::MissingAbnormalScore(c)) if c == ["c1"]
        ));
    }

    #[test]
    fn config_parsing() {
        let toml_src = r#"
            [[strata]]
            name = "women"
            field = "sex"
            op = "="
            value = "female"
            min_cases = 5

            [[strata]]
            name = "symptomatic"
            op = "any-of"
            values = ["cough", "fever"]

            [[strata]]
            name = "older"
            field = "age"
            op = "≥"
            value = 50

            [[strata]]
            name = "bad"
            field = "age"
            op = "<"
            value = "old"
        "#;
        #[derive(Deserialize)]
        struct Doc {
            strata: Vec<StratumConfig>,
        }
        let doc: Doc = toml::from_str(toml_src).unwrap();
        let specs: Vec<Result<StratumSpec, _>> =
            doc.strata.iter().map(StratumSpec::try_from).collect();
        assert_eq!(specs[0].as_ref().unwrap().min_cases, 5);
        assert!(
            matches!(&specs[1].as_ref().unwrap().predicate, Predicate::AnyOf { fields } if fields.len() == 2)
        );
        assert!(matches!(
            &specs[2].as_ref().unwrap().predicate,
            Predicate::Compare {
                op: CompareOp::Ge,
                ..
            }
        ));
        assert!(specs[3].is_err());
    }

    #[test]
    fn age_band_partition() {
        let mut cases: Vec<CaseRecord> = (0..50).map(|i| case(i, i % 3 == 0)).collect();
        for (i, c) in cases.iter_mut().enumerate() {
            c.age = if i == 49 { None } else { Some(18 + i as u32) };
        }
        let cohort = empty_reads_cohort(cases);
        let bands = age_bands(&cohort, 0);
        assert_eq!(bands.len(), 10);
        let total: usize = bands.iter().map(|b| stratify(&cohort, b).n_cases).sum();
        assert_eq!(total, 49);
    }

    fn arb_case(i: usize) -> impl Strategy<Value = CaseRecord> {
        (
            any::<bool>(),
            proptest::option::of(0u32..90),
            proptest::option::of(prop_oneof![
                Just(Sex::Female),
                Just(Sex::Male),
                Just(Sex::Unknown)
            ]),
            proptest::option::of(any::<bool>()),
            proptest::option::of(any::<bool>()),
        )
            .prop_map(move |(pos, age, sex, cough, hist)| {
                let mut c = case(i, pos);
                c.age = age;
                c.sex = sex;
                c.tb_history = hist;
                if let Some(v) = cough {
                    c.symptoms.insert(Symptom::Cough, v);
                }
                c
            })
    }

    fn arb_cohort() -> impl Strategy<Value = Cohort> {
        (1usize..40)
            .prop_flat_map(|n| {
                (
                    (0..n).map(arb_case).collect::<Vec<_>>(),
                    proptest::collection::vec((0..n, 0usize..4, any::<bool>()), 0..60),
                )
            })
            .prop_map(|(cases, flags)| {
                let mut seen = HashSet::new();
                let reads = flags
                    .into_iter()
                    .filter(|(k, j, _)| seen.insert((*k, *j)))
                    .map(|(k, j, t)| {
                        let mut r =
                            ReaderRead::new(format!("c{k}"), format!("r{j}"), Label::Negative);
                        r.technical_issue = t;
                        r
                    })
                    .collect();
                Cohort::new(cases, reads, readers(4)).unwrap()
            })
    }

    fn arb_predicate() -> impl Strategy<Value = Predicate> {
        prop_oneof![
            Just(Predicate::True),
            (0.0f64..90.0).prop_map(|t| Predicate::Compare {
                field: Field::Age,
                op: CompareOp::Lt,
                value: Value::Num(t)
            }),
            Just(Predicate::Compare {
                field: Field::Sex,
                op: CompareOp::Ne,
                value: Value::Text("male".into())
            }),
            Just(Predicate::AnyOf {
                fields: vec![Field::Symptom(Symptom::Cough), Field::TbHistory]
            }),
            (0.0f64..3.0).prop_map(|t| Predicate::Compare {
                field: Field::TechnicalIssueCount,
                op: CompareOp::Ge,
                value: Value::Num(t.floor())
            }),
            Just(Predicate::In {
                field: Field::TbLabel,
                values: vec![Value::Text("positive".into())]
            }),
        ]
    }

    proptest! {
        #[test]
        fn stratify_composes(cohort in arb_cohort(), p in arb_predicate(), q in arb_predicate()) {
            let sp = StratumSpec::new("p", p.clone(), 0).unwrap();
            let sq = StratumSpec::new("q", q.clone(), 0).unwrap();
            let both = StratumSpec::new("pq", p.and(q), 0).unwrap();
            let nested = stratify(&stratify(&cohort, &sp).cohort, &sq).cohort;
            prop_assert_eq!(nested, stratify(&cohort, &both).cohort);
        }

        #[test]
        fn technical_groups_partition(cohort in arb_cohort()) {
            let groups: BTreeMap<String, BTreeSet<String>> = technical_issue_groups(&cohort)
                .into_iter()
                .map(|(l, c)| (l, c.cases.into_iter().map(|c| c.case_id).collect()))
                .collect();
            let exact = ["0", "1", "2", ">=3"];
            let total: usize = exact.iter().map(|g| groups[*g].len()).sum();
            prop_assert_eq!(total, cohort.cases.len());
            let union: BTreeSet<String> = ["1", "2", ">=3"].iter().flat_map(|g| groups[*g].iter().cloned()).collect();
            prop_assert_eq!(&union, &groups[">=1"]);
            prop_assert!(groups[">=2"].is_subset(&groups[">=1"]));
        }

        #[test]
        fn abnormality_monotone_in_k(votes in proptest::collection::vec((any::<bool>(), 0usize..4), 1..30)) {
            let mut cases = Vec::new();
            let mut reads = Vec::new();
            for (k, (pos, n_abn)) in votes.iter().enumerate() {
                let mut c = case(k, *pos);
                c.dls_abnormal_score = Some(0.5);
                cases.push(c);
                for j in 0..3 {
                    let mut r = ReaderRead::new(format!("c{k}"), format!("r{j}"), Label::Negative);
                    r.abnormal_call = Some(j < *n_abn);
                    reads.push(r);
                }
            }
            let cohort = Cohort::new(cases, reads, readers(3)).unwrap();
            let gt: Vec<String> = (0..3).map(|j| format!("r{j}")).collect();
            for mode in [AbnormalityMode::TbOrAbnormal, AbnormalityMode::AbnormalOnly] {
                let l: Vec<Vec<bool>> = (1..=3).map(|k| abnormality_eval(&cohort, &gt, k, mode).unwrap().labels).collect();
                for ((k1, k2), k3) in l[0].iter().zip(&l[1]).zip(&l[2]) {
                    prop_assert!(!k3 || *k2);
                    prop_assert!(!k2 || *k1);
                }
            }
        }
    }
}
