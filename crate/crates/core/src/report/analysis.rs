use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde_json::{json, Value as Json};
use sha2::{Digest, Sha256};

use super::bundle::{
    verify_bundle, Bundle, Format, InputRecord, Manifest, Row, Table, VerifyReport, NA,
};
use super::config::RunConfig;
use super::ops::{
    pointer_token, BootStatistic, Filter, Operation, Selection, Slice, Target, ThresholdSpec,
};
use super::ReportError;
use crate::cohort::{
    detect_outlier_readers, read_cases, read_readers, read_reads, reader_positive_rates,
    tukey_fences, Cohort, CohortTag, Sex, Status,
};
use crate::cost::{prevalence_sweep, CostInputs};
use crate::inference::{classify_endpoint, Endpoint, TestStage};
use crate::operating_point::{MatchAxis, WHO_MIN_SENSITIVITY, WHO_MIN_SPECIFICITY};
use crate::subgroup::{
    age_bands, age_bands_with_edges, who_symptom_screen, AbnormalityMode, CompareOp, Field,
    Predicate, StratumSpec, Value, TECHNICAL_ISSUE_GROUPS,
};

const COMBINED: &str = "combined";
const PCT: Format = Format::Percent;
const PV: Format = Format::PValue;
const COUNT: Format = Format::Count;
const THRESHOLD: Format = Format::Fixed { digits: 4 };
const AUC: Format = Format::Fixed { digits: 4 };
const MRMC_FIELDS: [&str; 10] = [
    "/delta",
    "/se",
    "/df",
    "/p_ni",
    "/p_sup",
    "/threshold",
    "/n_readers",
    "/n_cases",
    "/components/s_d_squared",
    "/components/cov2_bar",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    WhoSens,
    WhoSpec,
    MeanReader,
    PerReader,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Section {
    Validate,
    Evaluate,
    Match {
        mode: MatchMode,
        target: Option<f64>,
    },
    Subgroup,
    DistShift,
    Cost,
    /// Human-readable `report.md`.
    Summary,
}

impl Section {
    /// Everything `report` produces.
    pub fn all() -> Vec<Section> {
        vec![
            Section::Validate,
            Section::Evaluate,
            Section::Match {
                mode: MatchMode::MeanReader,
                target: None,
            },
            Section::Match {
                mode: MatchMode::WhoSens,
                target: None,
            },
            Section::Match {
                mode: MatchMode::WhoSpec,
                target: None,
            },
            Section::Match {
                mode: MatchMode::PerReader,
                target: None,
            },
            Section::Subgroup,
            Section::DistShift,
            Section::Cost,
            Section::Summary,
        ]
    }

    fn needs_readers(self) -> bool {
        matches!(self, Section::Evaluate | Section::Subgroup)
            || matches!(
                self,
                Section::Match {
                    mode: MatchMode::MeanReader | MatchMode::PerReader,
                    ..
                }
            )
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub include_excluded_readers: bool,
    pub sections: Vec<Section>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub valid: bool,
    pub excluded_readers: Vec<String>,
    pub notes: Vec<String>,
    pub files: Vec<PathBuf>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_label(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn axis_endpoint(axis: MatchAxis) -> Endpoint {
    match axis {
        MatchAxis::Sensitivity => Endpoint::Sensitivity,
        MatchAxis::Specificity => Endpoint::Specificity,
    }
}

fn load_inputs(config: &RunConfig) -> Result<(Cohort, BTreeMap<String, InputRecord>), ReportError> {
    let mut inputs = BTreeMap::new();
    let mut read = |name: &str, rel: &Path| -> Result<(Vec<u8>, String), ReportError> {
        let path = config.resolve(rel);
        let bytes = std::fs::read(&path).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        inputs.insert(
            name.to_string(),
            InputRecord {
                path: rel.display().to_string(),
                sha256: sha256_hex(&bytes),
            },
        );
        Ok((bytes, path.display().to_string()))
    };
    let (cases, cases_name) = read("cases", &config.inputs.cases)?;
    let (reads, reads_name) = read("reads", &config.inputs.reads)?;
    let (readers, readers_name) = read("readers", &config.inputs.readers)?;
    let cohort = Cohort::new(
        read_cases(cases.as_slice(), &cases_name)?,
        read_reads(reads.as_slice(), &reads_name)?,
        read_readers(readers.as_slice(), &readers_name)?,
    )?;
    Ok((cohort, inputs))
}

struct Ctx<'a> {
    config: &'a RunConfig,
    cohort: Cohort,
    bundle: Bundle,
    datasets: Vec<String>,
    combined: Selection,
    tags: Vec<CohortTag>,
    highlights: Vec<String>,
}

impl<'a> Ctx<'a> {
    fn selections(&self) -> Vec<(String, Selection)> {
        let mut out: Vec<(String, Selection)> = self
            .datasets
            .iter()
            .map(|d| (d.clone(), Selection::datasets(vec![d.clone()])))
            .collect();
        out.push((COMBINED.to_string(), self.combined.clone()));
        out
    }

    fn eval(&mut self, op: &Operation) -> Result<Json, ReportError> {
        self.bundle.eval(&self.cohort, op)
    }

    /// Evaluate, turning data failures into a note and a null document.
    fn try_eval(&mut self, op: &Operation, context: &str) -> (Json, Option<String>) {
        match self.bundle.eval(&self.cohort, op) {
            Ok(v) => (v, None),
            Err(e) => {
                let msg = format!("{context}: {e}");
                self.bundle.note(msg.clone());
                (Json::Null, Some(e.to_string()))
            }
        }
    }

    /// Active readers of `tag` who read every case of `selection`.
    fn panel(
        &mut self,
        label: &str,
        selection: &Selection,
        tag: CohortTag,
    ) -> Result<Vec<String>, ReportError> {
        let sub = selection.apply(&self.cohort)?;
        let n = sub.cases.len();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for read in sub.active_reads() {
            *counts.entry(read.reader_id.as_str()).or_default() += 1;
        }
        let mut complete = Vec::new();
        let mut partial = Vec::new();
        for id in sub.readers_in(tag) {
            match counts.get(id.as_str()).copied().unwrap_or(0) {
                0 => {}
                c if c == n => complete.push(id),
                _ => partial.push(id),
            }
        }
        for id in partial {
            self.bundle.note(format!(
                "{label}: reader {id} ({tag}) did not read every case; left out of panel analyses"
            ));
        }
        Ok(complete)
    }

    fn validation(&mut self) -> Result<bool, ReportError> {
        let op = Operation::Validate;
        let mut doc = self.eval(&op)?;
        let valid = doc["violations"].as_array().is_none_or(|v| v.is_empty());
        let file = "validation.json";
        for key in [
            "n_cases",
            "n_positive",
            "n_negative",
            "n_reads",
            "n_readers",
        ] {
            let p = format!("/{key}");
            self.bundle.json_entry(file, &doc, &p, &op, &p);
        }
        for d in self.datasets.clone() {
            for key in ["cases", "positive", "negative"] {
                let p = format!("/datasets/{}/{key}", pointer_token(&d));
                self.bundle.json_entry(file, &doc, &p, &op, &p);
            }
        }
        if let Some(attrs) = doc["unknown_attributes"].as_object().cloned() {
            for name in attrs.keys() {
                for key in ["unknown", "fraction_unknown"] {
                    let p = format!("/unknown_attributes/{}/{key}", pointer_token(name));
                    self.bundle.json_entry(file, &doc, &p, &op, &p);
                }
            }
        }
        doc["valid"] = json!(valid);
        self.bundle.add_json(file, &doc)?;
        Ok(valid)
    }

    fn evaluate(&mut self) -> Result<(), ReportError> {
        let boot = self.config.bootstrap();
        let points = self.config.operating_points.clone();
        let mut auc_t = Table::new(
            "tables/auc.csv",
            &[
                "dataset",
                "n_cases",
                "n_positive",
                "n_negative",
                "auc",
                "auc_ci_lower",
                "auc_ci_upper",
                "notice",
            ],
        );
        let mut op_t = Table::new(
            "tables/operating_points.csv",
            &[
                "dataset",
                "operating_point",
                "threshold",
                "sensitivity",
                "sensitivity_ci_lower",
                "sensitivity_ci_upper",
                "specificity",
                "specificity_ci_lower",
                "specificity_ci_upper",
                "meets_who_profile",
                "notice",
            ],
        );
        for (label, sel) in self.selections() {
            let mut row = Row::new(label.clone());
            row.text("dataset", &label);
            let count_op = Operation::Count {
                selection: sel.clone(),
            };
            let counts = self.eval(&count_op)?;
            row.num("n_cases", COUNT, &count_op, &counts, "/n_cases");
            row.num("n_positive", COUNT, &count_op, &counts, "/n_positive");
            row.num("n_negative", COUNT, &count_op, &counts, "/n_negative");
            if counts["n_positive"] == 0 || counts["n_negative"] == 0 {
                let msg = "single-class data; ROC analyses skipped";
                self.bundle.note(format!("{label}: {msg}"));
                row.text("notice", msg);
                auc_t.push(row);
                continue;
            }

            let roc_op = Operation::Roc {
                selection: sel.clone(),
            };
            let roc = self.eval(&roc_op)?;
            let mut roc_t = Table::new(
                format!("roc/{}.csv", file_label(&label)),
                &["fpr", "tpr", "threshold"],
            );
            let n_points = roc["points"].as_array().map_or(0, Vec::len);
            for i in 0..n_points {
                let mut r = Row::new(i.to_string());
                r.num(
                    "fpr",
                    Format::Json,
                    &roc_op,
                    &roc,
                    &format!("/points/{i}/fpr"),
                );
                r.num(
                    "tpr",
                    Format::Json,
                    &roc_op,
                    &roc,
                    &format!("/points/{i}/tpr"),
                );
                if roc["points"][i]["threshold"].is_null() {
                    r.text("threshold", "");
                } else {
                    r.num(
                        "threshold",
                        Format::Json,
                        &roc_op,
                        &roc,
                        &format!("/points/{i}/threshold"),
                    );
                }
                roc_t.push(r);
            }
            self.bundle.add_table(roc_t)?;

            let auc_op = Operation::Auc {
                selection: sel.clone(),
            };
            let auc = self.eval(&auc_op)?;
            let auc_v = row.num("auc", AUC, &auc_op, &auc, "/auc");
            let ci_op = Operation::Bootstrap {
                selection: sel.clone(),
                statistic: BootStatistic::Auc,
                threshold: None,
                config: boot,
            };
            let (ci, err) = self.try_eval(&ci_op, &format!("{label} AUC interval"));
            let lo = row.num("auc_ci_lower", AUC, &ci_op, &ci, "/lower");
            let hi = row.num("auc_ci_upper", AUC, &ci_op, &ci, "/upper");
            if let Some(e) = err {
                row.text("notice", e);
            }
            if let (Some(a), Some(l), Some(h)) = (auc_v, lo, hi) {
                self.highlights.push(format!(
                    "AUC {label}: {} ({}-{})",
                    AUC.render(a),
                    AUC.render(l),
                    AUC.render(h)
                ));
            }
            auc_t.push(row);

            for (name, &t) in &points {
                let mut r = Row::new(format!("{label}|{name}"));
                r.text("dataset", &label).text("operating_point", name);
                let perf_op = Operation::Performance {
                    selection: sel.clone(),
                    threshold: ThresholdSpec::Fixed { value: t },
                };
                let perf = self.eval(&perf_op)?;
                r.num("threshold", THRESHOLD, &perf_op, &perf, "/threshold");
                let mut notices = Vec::new();
                for (stat, prefix) in [
                    (BootStatistic::Sensitivity, "sensitivity"),
                    (BootStatistic::Specificity, "specificity"),
                ] {
                    r.num(prefix, PCT, &perf_op, &perf, &format!("/point/{prefix}"));
                    let op = Operation::Bootstrap {
                        selection: sel.clone(),
                        statistic: stat,
                        threshold: Some(t),
                        config: boot,
                    };
                    let (ci, err) =
                        self.try_eval(&op, &format!("{label} {name} {prefix} interval"));
                    r.num(&format!("{prefix}_ci_lower"), PCT, &op, &ci, "/lower");
                    r.num(&format!("{prefix}_ci_upper"), PCT, &op, &ci, "/upper");
                    notices.extend(err);
                }
                let who = perf["point"]["sensitivity"].as_f64().unwrap_or(0.0)
                    >= WHO_MIN_SENSITIVITY - 1e-12
                    && perf["point"]["specificity"].as_f64().unwrap_or(0.0)
                        >= WHO_MIN_SPECIFICITY - 1e-12;
                r.text("meets_who_profile", if who { "yes" } else { "no" });
                r.text("notice", notices.join("; "));
                op_t.push(r);
            }
        }
        self.bundle.add_table(auc_t)?;
        self.bundle.add_table(op_t)?;

        for (name, &t) in &points {
            self.table2(name, t)?;
        }
        self.reader_rates()
    }

    fn mrmc_doc(
        &mut self,
        file: &str,
        op: &Operation,
        doc: &Json,
        extra: Json,
    ) -> Result<(), ReportError> {
        if doc.is_null() {
            return Ok(());
        }
        let mut out = doc.clone();
        if let (Some(o), Some(e)) = (out.as_object_mut(), extra.as_object()) {
            for (k, v) in e {
                o.insert(k.clone(), v.clone());
            }
        }
        for p in MRMC_FIELDS {
            self.bundle.json_entry(file, &out, p, op, p);
        }
        self.bundle.add_json(file, &out)
    }

    fn table2(&mut self, name: &str, threshold: f64) -> Result<(), ReportError> {
        let cfg = self.config;
        let primary = name == cfg.primary_operating_point;
        let file = if primary {
            "tables/table2.csv".to_string()
        } else {
            format!("tables/table2_{}.csv", file_label(name))
        };
        let mut cols = vec!["dataset", "reader_cohort", "n_readers", "threshold"];
        let per_endpoint = [
            "dls_{}",
            "readers_{}",
            "{}_difference",
            "{}_p_noninferiority",
            "{}_p_superiority",
        ];
        let owned: Vec<String> = ["sensitivity", "specificity"]
            .iter()
            .flat_map(|e| per_endpoint.iter().map(move |c| c.replace("{}", e)))
            .collect();
        cols.extend(owned.iter().map(String::as_str));
        cols.push("notice");
        let mut table = Table::new(file, &cols);
        let fixed = ThresholdSpec::Fixed { value: threshold };
        let mut primary_docs: BTreeMap<&str, (Operation, Json)> = BTreeMap::new();

        for (label, sel) in self.selections() {
            for tag in self.tags.clone() {
                let mut row = Row::new(format!("{label}|{tag}"));
                row.text("dataset", &label)
                    .text("reader_cohort", tag.as_str());
                let perf_op = Operation::Performance {
                    selection: sel.clone(),
                    threshold: fixed.clone(),
                };
                let (perf, err) = self.try_eval(&perf_op, &format!("{label} at {name}"));
                row.num("threshold", THRESHOLD, &perf_op, &perf, "/threshold");
                if let Some(e) = err {
                    row.text("notice", e);
                    table.push(row);
                    continue;
                }
                let readers = self.panel(&label, &sel, tag)?;
                if readers.is_empty() {
                    row.text("notice", "no reader of this cohort read every case");
                    table.push(row);
                    continue;
                }
                let stage = if primary && label == COMBINED && tag == cfg.primary_reader_cohort {
                    TestStage::Primary
                } else {
                    TestStage::Secondary
                };
                let mut notices = Vec::new();
                for (axis, prefix) in [
                    (MatchAxis::Sensitivity, "sensitivity"),
                    (MatchAxis::Specificity, "specificity"),
                ] {
                    row.num(
                        &format!("dls_{prefix}"),
                        PCT,
                        &perf_op,
                        &perf,
                        &format!("/point/{prefix}"),
                    );
                    let mean_op = Operation::ReaderMean {
                        selection: sel.clone(),
                        readers: readers.clone(),
                        axis,
                    };
                    let (mean, _) = self.try_eval(&mean_op, &format!("{label} {tag} mean reader"));
                    row.num(&format!("readers_{prefix}"), PCT, &mean_op, &mean, "/mean");
                    let op = Operation::Mrmc {
                        selection: sel.clone(),
                        readers: readers.clone(),
                        endpoint: axis_endpoint(axis),
                        threshold: fixed.clone(),
                        config: cfg.noninferiority,
                        stage,
                    };
                    let (doc, err) = self.try_eval(&op, &format!("{label} {tag} {prefix} MRMC"));
                    notices.extend(err);
                    row.num("n_readers", COUNT, &op, &doc, "/n_readers");
                    row.num(&format!("{prefix}_difference"), PCT, &op, &doc, "/delta");
                    row.num(
                        &format!("{prefix}_p_noninferiority"),
                        PV,
                        &op,
                        &doc,
                        "/p_ni",
                    );
                    row.num(&format!("{prefix}_p_superiority"), PV, &op, &doc, "/p_sup");
                    let doc_file = format!(
                        "tests/mrmc/{}/{}__{}__{prefix}.json",
                        file_label(name),
                        file_label(&label),
                        tag.as_str()
                    );
                    self.mrmc_doc(
                        &doc_file,
                        &op,
                        &doc,
                        json!({"dataset": label, "reader_cohort": tag.as_str(), "operating_point": name, "readers": readers, "stage": stage}),
                    )?;
                    if stage == TestStage::Primary && !doc.is_null() {
                        primary_docs.insert(prefix, (op.clone(), doc.clone()));
                    }
                }
                row.text("notice", notices.join("; "));
                table.push(row);
            }
        }
        self.bundle.add_table(table)?;
        if primary {
            self.primary_outcome(name, threshold, primary_docs)?;
        }
        Ok(())
    }

    fn primary_outcome(
        &mut self,
        name: &str,
        threshold: f64,
        docs: BTreeMap<&str, (Operation, Json)>,
    ) -> Result<(), ReportError> {
        let cfg = self.config;
        if docs.len() != 2 {
            self.bundle.note(format!(
                "primary analysis (combined, {}) unavailable",
                cfg.primary_reader_cohort
            ));
            return Ok(());
        }
        let mut out = json!({
            "dataset": COMBINED,
            "reader_cohort": cfg.primary_reader_cohort.as_str(),
            "operating_point": name,
            "threshold": threshold,
            "margin": cfg.noninferiority.margin,
            "alpha_primary": cfg.noninferiority.alpha_primary,
            "alpha": cfg.noninferiority.alpha,
        });
        let file = "tests/primary_outcome.json";
        let mut entries = Vec::new();
        for (prefix, (op, doc)) in &docs {
            let p_ni = doc["p_ni"].as_f64().unwrap_or(1.0);
            let p_sup = doc["p_sup"].as_f64();
            let outcome = classify_endpoint(p_ni, p_sup, &cfg.noninferiority);
            out[*prefix] = json!({
                "delta": doc["delta"],
                "p_noninferiority": doc["p_ni"],
                "p_superiority": doc["p_sup"],
                "outcome": outcome.as_str(),
            });
            self.highlights.push(format!(
                "Primary {prefix} vs {}: {} (p_ni {})",
                cfg.primary_reader_cohort,
                outcome.as_str(),
                PV.render(p_ni)
            ));
            for (ptr, field) in [
                ("delta", "/delta"),
                ("p_noninferiority", "/p_ni"),
                ("p_superiority", "/p_sup"),
            ] {
                entries.push((format!("/{prefix}/{ptr}"), op.clone(), field));
            }
        }
        for (ptr, op, field) in entries {
            self.bundle.json_entry(file, &out, &ptr, &op, field);
        }
        self.bundle.add_json(file, &out)
    }

    fn reader_rates(&mut self) -> Result<(), ReportError> {
        let op = Operation::ReaderRates;
        let rates = self.eval(&op)?;
        let mut t = Table::new(
            "tables/reader_rates.csv",
            &["reader_id", "cohort_tag", "positive_rate", "excluded"],
        );
        for reader in self.cohort.readers.clone() {
            let mut row = Row::new(reader.reader_id.clone());
            row.text("reader_id", &reader.reader_id)
                .text("cohort_tag", reader.cohort_tag.as_str());
            row.num(
                "positive_rate",
                PCT,
                &op,
                &rates,
                &format!("/{}", pointer_token(&reader.reader_id)),
            );
            row.text(
                "excluded",
                if self.cohort.is_excluded(&reader.reader_id) {
                    "yes"
                } else {
                    "no"
                },
            );
            t.push(row);
        }
        self.bundle.add_table(t)
    }

    fn table3(&mut self) -> Result<(), ReportError> {
        let cfg = self.config;
        let mut t = Table::new(
            "tables/table3.csv",
            &[
                "dataset",
                "reader_cohort",
                "matched_on",
                "target",
                "threshold",
                "dls_matched",
                "compared_on",
                "dls_value",
                "readers_value",
                "difference",
                "p_noninferiority",
                "p_superiority",
                "notice",
            ],
        );
        for (label, sel) in self.selections() {
            for tag in self.tags.clone() {
                let readers = self.panel(&label, &sel, tag)?;
                for axis in [MatchAxis::Specificity, MatchAxis::Sensitivity] {
                    let other = axis.other();
                    let mut row = Row::new(format!("{label}|{tag}|{}", axis.as_str()));
                    row.text("dataset", &label)
                        .text("reader_cohort", tag.as_str())
                        .text("matched_on", axis.as_str())
                        .text("compared_on", other.as_str());
                    if readers.is_empty() {
                        row.text("notice", "no reader of this cohort read every case");
                        t.push(row);
                        continue;
                    }
                    let target_op = Operation::ReaderMean {
                        selection: sel.clone(),
                        readers: readers.clone(),
                        axis,
                    };
                    let (target, _) =
                        self.try_eval(&target_op, &format!("{label} {tag} mean reader"));
                    row.num("target", PCT, &target_op, &target, "/mean");
                    let thr = ThresholdSpec::Matched {
                        axis,
                        target: Target::MeanReader {
                            readers: readers.clone(),
                        },
                    };
                    let perf_op = Operation::Performance {
                        selection: sel.clone(),
                        threshold: thr.clone(),
                    };
                    let (perf, err) =
                        self.try_eval(&perf_op, &format!("{label} {tag} matched point"));
                    row.num("threshold", THRESHOLD, &perf_op, &perf, "/threshold");
                    row.num(
                        "dls_matched",
                        PCT,
                        &perf_op,
                        &perf,
                        &format!("/point/{}", axis.as_str()),
                    );
                    row.num(
                        "dls_value",
                        PCT,
                        &perf_op,
                        &perf,
                        &format!("/point/{}", other.as_str()),
                    );
                    let other_op = Operation::ReaderMean {
                        selection: sel.clone(),
                        readers: readers.clone(),
                        axis: other,
                    };
                    let (other_mean, _) =
                        self.try_eval(&other_op, &format!("{label} {tag} mean reader"));
                    row.num("readers_value", PCT, &other_op, &other_mean, "/mean");
                    let mut notices: Vec<String> = err.into_iter().collect();
                    let op = Operation::Mrmc {
                        selection: sel.clone(),
                        readers: readers.clone(),
                        endpoint: axis_endpoint(other),
                        threshold: thr,
                        config: cfg.noninferiority,
                        stage: TestStage::Secondary,
                    };
                    let (doc, err) = self.try_eval(&op, &format!("{label} {tag} matched MRMC"));
                    notices.extend(err);
                    row.num("difference", PCT, &op, &doc, "/delta");
                    row.num("p_noninferiority", PV, &op, &doc, "/p_ni");
                    row.num("p_superiority", PV, &op, &doc, "/p_sup");
                    let doc_file = format!(
                        "tests/mrmc/matched/{}__{}__{}_at_mean_{}.json",
                        file_label(&label),
                        tag.as_str(),
                        other.as_str(),
                        axis.as_str()
                    );
                    self.mrmc_doc(
                        &doc_file,
                        &op,
                        &doc,
                        json!({"dataset": label, "reader_cohort": tag.as_str(), "matched_on": axis.as_str(), "readers": readers}),
                    )?;
                    row.text("notice", notices.join("; "));
                    t.push(row);
                }
            }
        }
        self.bundle.add_table(t)
    }

    fn table4(&mut self, rules: &[(MatchAxis, f64)]) -> Result<(), ReportError> {
        let mut t = Table::new(
            "tables/table4.csv",
            &[
                "dataset",
                "matched_on",
                "target",
                "threshold",
                "sensitivity",
                "specificity",
                "meets_who_profile",
                "notice",
            ],
        );
        for (label, sel) in self.selections() {
            for &(axis, target) in rules {
                let mut row = Row::new(format!("{label}|{}", axis.as_str()));
                row.text("dataset", &label)
                    .text("matched_on", axis.as_str())
                    .text("target", PCT.render(target));
                let op = Operation::Performance {
                    selection: sel.clone(),
                    threshold: ThresholdSpec::Matched {
                        axis,
                        target: Target::Value { value: target },
                    },
                };
                let (doc, err) = self.try_eval(&op, &format!("{label} WHO {}", axis.as_str()));
                row.num("threshold", THRESHOLD, &op, &doc, "/threshold");
                let se = row.num("sensitivity", PCT, &op, &doc, "/point/sensitivity");
                let sp = row.num("specificity", PCT, &op, &doc, "/point/specificity");
                if let (Some(se), Some(sp)) = (se, sp) {
                    let ok = se >= WHO_MIN_SENSITIVITY - 1e-12 && sp >= WHO_MIN_SPECIFICITY - 1e-12;
                    row.text("meets_who_profile", if ok { "yes" } else { "no" });
                    if label == COMBINED {
                        self.highlights.push(format!(
                            "WHO {} target {} on combined: sensitivity {}, specificity {}",
                            axis.as_str(),
                            PCT.render(target),
                            PCT.render(se),
                            PCT.render(sp)
                        ));
                    }
                }
                if let Some(e) = err {
                    row.text("notice", e);
                }
                t.push(row);
            }
        }
        self.bundle.add_table(t)
    }

    fn table_s3(&mut self) -> Result<(), ReportError> {
        let cfg = self.config;
        let datasets = cfg
            .per_reader_datasets
            .clone()
            .unwrap_or_else(|| self.datasets.clone());
        let mut t = Table::new(
            "tables/table_s3.csv",
            &[
                "dataset",
                "reader_id",
                "reader_cohort",
                "matched_on",
                "reader_matched",
                "threshold",
                "compared_on",
                "dls_value",
                "reader_value",
                "difference",
                "wald_p_noninferiority",
                "mcnemar_p",
                "notice",
            ],
        );
        for label in datasets {
            let sel = Selection::datasets(vec![label.clone()]);
            for tag in self.tags.clone() {
                for reader in self.panel(&label, &sel, tag)? {
                    let reader_op = Operation::ReaderPerformance {
                        selection: sel.clone(),
                        reader: reader.clone(),
                    };
                    let (rp, _) = self.try_eval(&reader_op, &format!("{label} {reader}"));
                    for axis in [MatchAxis::Specificity, MatchAxis::Sensitivity] {
                        let other = axis.other();
                        let mut row = Row::new(format!("{label}|{reader}|{}", axis.as_str()));
                        row.text("dataset", &label)
                            .text("reader_id", &reader)
                            .text("reader_cohort", tag.as_str())
                            .text("matched_on", axis.as_str())
                            .text("compared_on", other.as_str());
                        row.num(
                            "reader_matched",
                            PCT,
                            &reader_op,
                            &rp,
                            &format!("/{}", axis.as_str()),
                        );
                        row.num(
                            "reader_value",
                            PCT,
                            &reader_op,
                            &rp,
                            &format!("/{}", other.as_str()),
                        );
                        let thr = ThresholdSpec::Matched {
                            axis,
                            target: Target::Reader {
                                reader: reader.clone(),
                            },
                        };
                        let perf_op = Operation::Performance {
                            selection: sel.clone(),
                            threshold: thr.clone(),
                        };
                        let (perf, e1) =
                            self.try_eval(&perf_op, &format!("{label} {reader} matched point"));
                        row.num("threshold", THRESHOLD, &perf_op, &perf, "/threshold");
                        row.num(
                            "dls_value",
                            PCT,
                            &perf_op,
                            &perf,
                            &format!("/point/{}", other.as_str()),
                        );
                        let op = Operation::Paired {
                            selection: sel.clone(),
                            reader: reader.clone(),
                            endpoint: axis_endpoint(other),
                            threshold: thr,
                            margin: cfg.noninferiority.margin,
                        };
                        let (doc, e2) =
                            self.try_eval(&op, &format!("{label} {reader} paired tests"));
                        row.num("difference", PCT, &op, &doc, "/wald/delta");
                        row.num("wald_p_noninferiority", PV, &op, &doc, "/wald/p_value");
                        row.num("mcnemar_p", PV, &op, &doc, "/mcnemar_p");
                        let notices: Vec<String> = e1.into_iter().chain(e2).collect();
                        row.text("notice", notices.join("; "));
                        t.push(row);
                    }
                }
            }
        }
        self.bundle.add_table(t)
    }

    fn strata(&self) -> Result<Vec<StratumSpec>, ReportError> {
        let cfg = self.config;
        let min = cfg.min_stratum_cases;
        let mut specs = cfg.stratum_specs()?;
        if cfg.default_strata {
            let eq = |name: &str, field: Field, value: Value| StratumSpec {
                name: name.into(),
                predicate: Predicate::Compare {
                    field,
                    op: CompareOp::Eq,
                    value,
                },
                min_cases: min,
            };
            let text = |s: &str| Value::Text(s.into());
            let status = |s: Status| {
                text(if s == Status::Positive {
                    "positive"
                } else {
                    "negative"
                })
            };
            let sex = |s: Sex| text(if s == Sex::Female { "female" } else { "male" });
            specs.extend([
                eq("hiv_positive", Field::HivStatus, status(Status::Positive)),
                eq("hiv_negative", Field::HivStatus, status(Status::Negative)),
                eq(
                    "smear_positive",
                    Field::SmearStatus,
                    status(Status::Positive),
                ),
                eq(
                    "smear_negative",
                    Field::SmearStatus,
                    status(Status::Negative),
                ),
                eq("female", Field::Sex, sex(Sex::Female)),
                eq("male", Field::Sex, sex(Sex::Male)),
                eq("tb_history", Field::TbHistory, Value::Bool(true)),
                eq("no_tb_history", Field::TbHistory, Value::Bool(false)),
                who_symptom_screen(min),
            ]);
            let combined = self.combined.apply(&self.cohort)?;
            specs.extend(match &cfg.age_edges {
                Some(edges) => age_bands_with_edges(edges, min),
                None => age_bands(&combined, min),
            });
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = specs.iter().find(|s| !seen.insert(s.name.clone())) {
            return Err(ReportError::Config(format!(
                "duplicate stratum name `{}`",
                dup.name
            )));
        }
        Ok(specs)
    }

    /// AUC and rates at the primary threshold on `sel`; `false` when skipped.
    fn subgroup_metrics(
        &mut self,
        row: &mut Row,
        label: &str,
        sel: &Selection,
        notices: &mut Vec<String>,
    ) -> Result<bool, ReportError> {
        let count_op = Operation::Count {
            selection: sel.clone(),
        };
        let counts = self.eval(&count_op)?;
        row.num("n_positive", COUNT, &count_op, &counts, "/n_positive");
        row.num("n_negative", COUNT, &count_op, &counts, "/n_negative");
        if counts["n_positive"] == 0 || counts["n_negative"] == 0 {
            notices.push("single-class data; analyses skipped".into());
            self.bundle
                .note(format!("{label}: single-class data; analyses skipped"));
            return Ok(false);
        }
        let auc_op = Operation::Auc {
            selection: sel.clone(),
        };
        let (auc, e) = self.try_eval(&auc_op, label);
        notices.extend(e);
        row.num("auc", AUC, &auc_op, &auc, "/auc");
        let perf_op = Operation::Performance {
            selection: sel.clone(),
            threshold: ThresholdSpec::Fixed {
                value: self.config.primary_threshold(),
            },
        };
        let (perf, e) = self.try_eval(&perf_op, label);
        notices.extend(e);
        row.num("sensitivity", PCT, &perf_op, &perf, "/point/sensitivity");
        row.num("specificity", PCT, &perf_op, &perf, "/point/specificity");
        Ok(true)
    }

    fn subgroups(&mut self) -> Result<(), ReportError> {
        let cfg = self.config;
        let specs = self.strata()?;
        let mut t = Table::new(
            "tables/subgroups.csv",
            &[
                "stratum",
                "n_cases",
                "n_unknown",
                "n_positive",
                "n_negative",
                "suppressed",
                "auc",
                "sensitivity",
                "specificity",
                "sensitivity_p_noninferiority",
                "specificity_p_noninferiority",
                "notice",
            ],
        );
        for spec in specs {
            let mut row = Row::new(spec.name.clone());
            row.text("stratum", &spec.name);
            let st_op = Operation::Stratum {
                selection: self.combined.clone(),
                spec: spec.clone(),
            };
            let st = self.eval(&st_op)?;
            row.num("n_cases", COUNT, &st_op, &st, "/n_cases");
            row.num("n_unknown", COUNT, &st_op, &st, "/n_unknown");
            let suppressed = st["suppressed"].as_bool().unwrap_or(false);
            row.text("suppressed", if suppressed { "yes" } else { "no" });
            let mut notices = Vec::new();
            let sel = self.combined.with_filter(Filter::Stratum(spec.clone()));
            if suppressed {
                let msg = format!("fewer than {} cases; analyses suppressed", spec.min_cases);
                self.bundle.note(format!("stratum {}: {msg}", spec.name));
                notices.push(msg);
            } else if self.subgroup_metrics(&mut row, &spec.name, &sel, &mut notices)? {
                let readers = self.panel(&spec.name, &sel, cfg.primary_reader_cohort)?;
                if readers.is_empty() {
                    notices.push(format!("no complete {} panel", cfg.primary_reader_cohort));
                } else {
                    for (axis, col) in [
                        (MatchAxis::Sensitivity, "sensitivity_p_noninferiority"),
                        (MatchAxis::Specificity, "specificity_p_noninferiority"),
                    ] {
                        let op = Operation::Mrmc {
                            selection: sel.clone(),
                            readers: readers.clone(),
                            endpoint: axis_endpoint(axis),
                            threshold: ThresholdSpec::Fixed {
                                value: cfg.primary_threshold(),
                            },
                            config: cfg.noninferiority,
                            stage: TestStage::Secondary,
                        };
                        let (doc, e) = self.try_eval(&op, &format!("stratum {} MRMC", spec.name));
                        notices.extend(e);
                        row.num(col, PV, &op, &doc, "/p_ni");
                    }
                }
            }
            row.text("notice", notices.join("; "));
            t.push(row);
        }
        self.bundle.add_table(t)?;

        let mut t = Table::new(
            "tables/technical_issue.csv",
            &[
                "group",
                "n_cases",
                "n_positive",
                "n_negative",
                "auc",
                "sensitivity",
                "specificity",
                "notice",
            ],
        );
        for group in TECHNICAL_ISSUE_GROUPS {
            let sel = self
                .combined
                .with_filter(Filter::TechnicalIssue(group.to_string()));
            let mut row = Row::new(group);
            row.text("group", group);
            let count_op = Operation::Count {
                selection: sel.clone(),
            };
            let counts = self.eval(&count_op)?;
            row.num("n_cases", COUNT, &count_op, &counts, "/n_cases");
            let mut notices = Vec::new();
            if counts["n_cases"] == 0 {
                notices.push("empty group".to_string());
                row.num("n_positive", COUNT, &count_op, &counts, "/n_positive");
                row.num("n_negative", COUNT, &count_op, &counts, "/n_negative");
            } else {
                self.subgroup_metrics(
                    &mut row,
                    &format!("technical issue {group}"),
                    &sel,
                    &mut notices,
                )?;
            }
            row.text("notice", notices.join("; "));
            t.push(row);
        }
        self.bundle.add_table(t)?;

        let gt = cfg.abnormality.ground_truth_readers.clone();
        if gt.is_empty() {
            self.bundle
                .note("abnormality analysis skipped: no ground-truth readers configured");
            return Ok(());
        }
        let mut t = Table::new(
            "tables/abnormality.csv",
            &["mode", "k", "n_cases", "n_positive", "auc", "notice"],
        );
        for (mode, mode_name) in [
            (AbnormalityMode::TbOrAbnormal, "tb_or_abnormal"),
            (AbnormalityMode::AbnormalOnly, "abnormal_only"),
        ] {
            for k in 1..=3 {
                let mut row = Row::new(format!("{mode_name}|{k}"));
                row.text("mode", mode_name).text("k", k.to_string());
                let op = Operation::Abnormality {
                    selection: self.combined.clone(),
                    ground_truth: gt.clone(),
                    k,
                    mode,
                };
                let (doc, e) = self.try_eval(&op, &format!("abnormality {mode_name} k={k}"));
                row.num("n_cases", COUNT, &op, &doc, "/n_cases");
                row.num("n_positive", COUNT, &op, &doc, "/n_positive");
                row.num("auc", AUC, &op, &doc, "/auc");
                row.text("notice", e.unwrap_or_default());
                t.push(row);
            }
        }
        self.bundle.add_table(t)
    }

    fn dist_shift(&mut self) -> Result<(), ReportError> {
        let width = self.config.histogram_bin_width;
        let datasets = self.datasets.clone();
        let one = |d: &String| Selection::datasets(vec![d.clone()]);

        let mut summary = Table::new(
            "tables/table_s5_summary.csv",
            &["dataset", "slice", "n", "mean", "sd"],
        );
        let mut hist = Table::new(
            "tables/figure3_histograms.csv",
            &["dataset", "slice", "bin_lower", "bin_upper", "count"],
        );
        let mut sizes: BTreeMap<(String, Slice), usize> = BTreeMap::new();
        for d in &datasets {
            for slice in Slice::ALL {
                let op = Operation::SliceSummary {
                    selection: one(d),
                    slice,
                };
                let doc = self.eval(&op)?;
                sizes.insert((d.clone(), slice), doc["n"].as_u64().unwrap_or(0) as usize);
                let mut row = Row::new(format!("{d}|{}", slice.as_str()));
                row.text("dataset", d).text("slice", slice.as_str());
                row.num("n", COUNT, &op, &doc, "/n");
                row.num("mean", Format::Fixed { digits: 4 }, &op, &doc, "/mean");
                row.num("sd", Format::Fixed { digits: 4 }, &op, &doc, "/sd");
                summary.push(row);

                let hop = Operation::Histogram {
                    selection: one(d),
                    slice,
                    bin_width: width,
                };
                let h = self.eval(&hop)?;
                let n_bins = h["counts"].as_array().map_or(0, Vec::len);
                for b in 0..n_bins {
                    let lo = b as f64 * width;
                    let hi = ((b + 1) as f64 * width).min(1.0);
                    let mut row = Row::new(format!("{d}|{}|{b}", slice.as_str()));
                    row.text("dataset", d)
                        .text("slice", slice.as_str())
                        .text("bin_lower", format!("{lo:.2}"))
                        .text("bin_upper", format!("{hi:.2}"));
                    row.num("count", COUNT, &hop, &h, &format!("/counts/{b}"));
                    hist.push(row);
                }
            }
        }
        self.bundle.add_table(summary)?;
        self.bundle.add_table(hist)?;

        let mut header = vec!["dataset"];
        header.extend(datasets.iter().map(String::as_str));
        for slice in Slice::ALL {
            let mut t = Table::new(format!("tables/table_s5_{}.csv", slice.as_str()), &header);
            for (i, a) in datasets.iter().enumerate() {
                let mut row = Row::new(a.clone());
                row.text("dataset", a);
                for b in &datasets[..i] {
                    if sizes[&(a.clone(), slice)] == 0 || sizes[&(b.clone(), slice)] == 0 {
                        row.text(b, NA);
                        continue;
                    }
                    let op = Operation::Ks {
                        a: one(a),
                        b: one(b),
                        slice,
                    };
                    let doc = self.eval(&op)?;
                    row.num(b, PV, &op, &doc, "/p_value");
                }
                t.push(row);
            }
            self.bundle.add_table(t)?;
        }
        Ok(())
    }

    fn cost(&mut self) -> Result<(), ReportError> {
        let cc = self.config.cost.clone();
        let perf_op = Operation::Performance {
            selection: self.combined.clone(),
            threshold: ThresholdSpec::Fixed {
                value: self.config.primary_threshold(),
            },
        };
        let (perf, _) = self.try_eval(&perf_op, "measured operating point for cost");
        let mut scenarios: Vec<(&str, CostInputs)> = Vec::new();
        if let (Some(se), Some(sp)) = (
            perf.pointer("/point/sensitivity").and_then(Json::as_f64),
            perf.pointer("/point/specificity").and_then(Json::as_f64),
        ) {
            scenarios.push((
                "measured",
                cc.inputs(super::config::DevicePerformance {
                    sensitivity: se,
                    specificity: sp,
                }),
            ));
        } else {
            self.bundle
                .note("cost: measured scenario skipped, no measured operating point");
        }
        scenarios.push(("who_target", cc.inputs(cc.who_target)));
        scenarios.push(("lower_spec", cc.inputs(cc.lower_spec_device)));
        scenarios.push(("naat_only", cc.naat_only()));

        let mut figure = json!({ "scenarios": {} });
        let mut json_entries: Vec<(String, Operation, String)> = Vec::new();
        for (name, inputs) in scenarios {
            let sweep = prevalence_sweep(
                &inputs,
                cc.prevalence_min,
                cc.prevalence_max,
                cc.prevalence_step,
            )?;
            let mut t = Table::new(
                format!("cost/{name}.csv"),
                &[
                    "prevalence",
                    "triage_positive_rate",
                    "cost_per_patient",
                    "cost_per_case",
                    "naat_only_cost_per_case",
                    "savings",
                ],
            );
            let mut points = Vec::new();
            for (i, r) in sweep.rows.iter().enumerate() {
                let op = Operation::Cost {
                    inputs: inputs.at_prevalence(r.prevalence),
                };
                let doc = self.eval(&op)?;
                let mut row = Row::new(format!("{name}|{}", r.prevalence));
                row.text("prevalence", format!("{:.4}", r.prevalence));
                row.num(
                    "triage_positive_rate",
                    Format::Fixed { digits: 4 },
                    &op,
                    &doc,
                    "/triage_positive_rate",
                );
                row.num(
                    "cost_per_patient",
                    Format::Fixed { digits: 2 },
                    &op,
                    &doc,
                    "/cost_per_patient_screened",
                );
                row.num(
                    "cost_per_case",
                    Format::Fixed { digits: 2 },
                    &op,
                    &doc,
                    "/cost_per_case_detected",
                );
                row.num(
                    "naat_only_cost_per_case",
                    Format::Fixed { digits: 2 },
                    &op,
                    &doc,
                    "/naat_only_cost_per_case",
                );
                row.num("savings", PCT, &op, &doc, "/savings_fraction");
                t.push(row);
                points.push(json!({
                    "prevalence": r.prevalence,
                    "triage_positive_rate": doc["triage_positive_rate"],
                    "cost_per_case_detected": doc["cost_per_case_detected"],
                    "savings_fraction": doc["savings_fraction"],
                }));
                for f in [
                    "triage_positive_rate",
                    "cost_per_case_detected",
                    "savings_fraction",
                ] {
                    json_entries.push((
                        format!("/scenarios/{name}/points/{i}/{f}"),
                        op.clone(),
                        format!("/{f}"),
                    ));
                }
            }
            self.bundle.add_table(t)?;
            if name != "naat_only" {
                if let (Some(first), Some(last)) = (sweep.rows.first(), sweep.rows.last()) {
                    self.highlights.push(format!(
                        "Cost {name} (sensitivity {}, specificity {}): savings {} at prevalence {} and {} at {}",
                        PCT.render(inputs.sensitivity),
                        PCT.render(inputs.specificity),
                        PCT.render(last.result.savings_fraction),
                        last.prevalence,
                        PCT.render(first.result.savings_fraction),
                        first.prevalence
                    ));
                }
            }
            figure["scenarios"][name] = json!({
                "sensitivity": inputs.sensitivity,
                "specificity": inputs.specificity,
                "cost_decreasing_in_prevalence": sweep.cost_decreasing_in_prevalence,
                "savings_increasing_as_prevalence_falls": sweep.savings_increasing_as_prevalence_falls,
                "points": points,
            });
            if name == "measured" {
                for (f, field) in [
                    ("sensitivity", "/point/sensitivity"),
                    ("specificity", "/point/specificity"),
                ] {
                    json_entries.push((
                        format!("/scenarios/measured/{f}"),
                        perf_op.clone(),
                        field.to_string(),
                    ));
                }
            }
        }
        for (ptr, op, field) in json_entries {
            self.bundle
                .json_entry("cost/figure5.json", &figure, &ptr, &op, &field);
        }
        self.bundle.add_json("cost/figure5.json", &figure)
    }

    fn summary(&mut self, excluded: &[String]) {
        let mut s = String::from("# Screening evaluation report\n\n");
        s.push_str(&format!(
            "Datasets: {}. Combined set: {}.\n\n",
            self.datasets.join(", "),
            self.combined.datasets.join(", ")
        ));
        s.push_str(&format!(
            "Primary operating point `{}` at threshold {}; comparator cohort {}.\n\n",
            self.config.primary_operating_point,
            self.config.primary_threshold(),
            self.config.primary_reader_cohort
        ));
        if excluded.is_empty() {
            s.push_str("No readers excluded.\n\n");
        } else {
            s.push_str(&format!("Excluded readers: {}.\n\n", excluded.join(", ")));
        }
        s.push_str("## Results\n\n");
        for h in &self.highlights {
            s.push_str(&format!("- {h}\n"));
        }
        if !self.bundle.notes.is_empty() {
            s.push_str("\n## Notes\n\n");
            for n in &self.bundle.notes {
                s.push_str(&format!("- {n}\n"));
            }
        }
        s.push_str("\nTables are under `tables/`, test documents under `tests/`, cost sweeps under `cost/`. ");
        s.push_str("`manifest.json` records how every number was computed.\n");
        self.bundle.add_text("report.md", s);
    }
}

/// Screen each reader cohort for outlying positive-call rates.
fn screen_outliers(
    raw: &Cohort,
    config: &RunConfig,
    bundle: &mut Bundle,
) -> Result<BTreeSet<String>, ReportError> {
    let mut flagged: BTreeSet<String> = BTreeSet::new();
    for id in &config.outliers.manual_exclusions {
        if raw.reader(id).is_none() {
            return Err(ReportError::Config(format!(
                "manual exclusion names unknown reader `{id}`"
            )));
        }
        bundle.note(format!("reader {id} excluded by configuration"));
        flagged.insert(id.clone());
    }
    if !config.outliers.enabled {
        return Ok(flagged);
    }
    let rates = reader_positive_rates(raw);
    let tags: BTreeSet<CohortTag> = raw.readers.iter().map(|r| r.cohort_tag).collect();
    for tag in tags {
        let ids: BTreeSet<String> = raw.readers_in(tag).into_iter().collect();
        let tag_rates: BTreeMap<String, f64> = rates
            .iter()
            .filter(|(id, _)| ids.contains(*id) && !flagged.contains(*id))
            .map(|(id, &r)| (id.clone(), r))
            .collect();
        if tag_rates.len() < 4 {
            bundle.note(format!(
                "outlier screen skipped for {tag}: {} readers, need at least 4",
                tag_rates.len()
            ));
            continue;
        }
        let fences = tukey_fences(&tag_rates.values().copied().collect::<Vec<_>>());
        for id in detect_outlier_readers(&tag_rates)? {
            bundle.note(format!(
                "reader {id} ({tag}) excluded as an outlier: positive rate {:.4} outside [{:.4}, {:.4}]",
                tag_rates[&id], fences.lower, fences.upper
            ));
            flagged.insert(id);
        }
    }
    Ok(flagged)
}

pub fn run(config: &RunConfig, options: &RunOptions) -> Result<RunOutcome, ReportError> {
    config.validate()?;
    let (raw, inputs) = load_inputs(config)?;
    let mut bundle = Bundle::default();

    let flagged = screen_outliers(&raw, config, &mut bundle)?;
    let excluded: Vec<String> = if options.include_excluded_readers {
        if !flagged.is_empty() {
            bundle.note(format!(
                "flagged readers kept in analyses on request: {}",
                flagged.iter().cloned().collect::<Vec<_>>().join(", ")
            ));
        }
        Vec::new()
    } else {
        flagged.into_iter().collect()
    };
    let cohort = raw.exclude_readers(excluded.iter())?;

    let datasets = cohort.datasets();
    let combined = match &config.combined_datasets {
        Some(list) => {
            if let Some(d) = list.iter().find(|d| !datasets.contains(d)) {
                return Err(ReportError::Config(format!(
                    "combined_datasets names unknown dataset `{d}`"
                )));
            }
            list.clone()
        }
        None => datasets.clone(),
    };
    if let Some(list) = &config.per_reader_datasets {
        if let Some(d) = list.iter().find(|d| !datasets.contains(d)) {
            return Err(ReportError::Config(format!(
                "per_reader_datasets names unknown dataset `{d}`"
            )));
        }
    }
    let tags: Vec<CohortTag> = cohort
        .active_readers()
        .map(|r| r.cohort_tag)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if options.sections.iter().any(|s| s.needs_readers())
        && !tags.contains(&config.primary_reader_cohort)
    {
        return Err(ReportError::Config(format!(
            "primary reader cohort {} has no active readers",
            config.primary_reader_cohort
        )));
    }
    for id in &config.abnormality.ground_truth_readers {
        if cohort.reader(id).is_none() {
            return Err(ReportError::Config(format!(
                "ground-truth reader `{id}` not in readers file"
            )));
        }
    }

    let mut ctx = Ctx {
        config,
        cohort,
        bundle,
        datasets,
        combined: Selection::datasets(combined),
        tags,
        highlights: Vec::new(),
    };
    let valid = ctx.validation()?;
    if !valid {
        ctx.bundle
            .note("validation found violations; analyses skipped");
    } else {
        let who_rules = |mode: MatchMode, target: Option<f64>| match mode {
            MatchMode::WhoSens => vec![(
                MatchAxis::Sensitivity,
                target.unwrap_or(WHO_MIN_SENSITIVITY),
            )],
            _ => vec![(
                MatchAxis::Specificity,
                target.unwrap_or(WHO_MIN_SPECIFICITY),
            )],
        };
        let mut who: Vec<(MatchAxis, f64)> = Vec::new();
        for section in &options.sections {
            match *section {
                Section::Validate | Section::Summary => {}
                Section::Evaluate => ctx.evaluate()?,
                Section::Match { mode, target } => match mode {
                    MatchMode::MeanReader => ctx.table3()?,
                    MatchMode::PerReader => ctx.table_s3()?,
                    MatchMode::WhoSens | MatchMode::WhoSpec => who.extend(who_rules(mode, target)),
                },
                Section::Subgroup => ctx.subgroups()?,
                Section::DistShift => ctx.dist_shift()?,
                Section::Cost => ctx.cost()?,
            }
        }
        if !who.is_empty() {
            ctx.table4(&who)?;
        }
    }
    if options.sections.contains(&Section::Summary) {
        ctx.summary(&excluded);
    }

    let mut hashed = config.clone();
    hashed.output_dir = PathBuf::new();
    let config_bytes = serde_json::to_vec(&hashed).map_err(|e| ReportError::Data(e.to_string()))?;
    let manifest = ctx.bundle.manifest(
        sha256_hex(&config_bytes),
        config.seed,
        inputs,
        excluded.clone(),
    );
    let files = ctx.bundle.write(&options.out_dir, &manifest)?;
    Ok(RunOutcome {
        valid,
        excluded_readers: excluded,
        notes: ctx.bundle.notes.clone(),
        files,
    })
}

/// Re-derive every logged number of the bundle in `dir` from the inputs
/// named by `config`, and check the inputs still hash as recorded.
pub fn verify_run(config: &RunConfig, dir: &Path) -> Result<VerifyReport, ReportError> {
    let (cohort, inputs) = load_inputs(config)?;
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|source| ReportError::Io { path, source })?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| ReportError::Data(format!("manifest: {e}")))?;
    let mut report = verify_bundle(dir, &cohort)?;
    for (name, rec) in &manifest.inputs {
        match inputs.get(name) {
            Some(now) if now.sha256 == rec.sha256 => {}
            _ => report.mismatches.push(format!(
                "input {name} ({}) differs from the recorded hash",
                rec.path
            )),
        }
    }
    Ok(report)
}
