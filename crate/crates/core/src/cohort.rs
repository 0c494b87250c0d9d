//! Case records, reader reads and reader metadata.
//!
//! A [`Cohort`] is loaded from three CSV files and is immutable afterwards.
//! Referential integrity is enforced at construction; softer hygiene rules
//! (one case per patient per dataset) are reported by [`validate`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CASES_HEADER: [&str; 17] = [
    "case_id",
    "dataset",
    "patient_id",
    "tb_label",
    "dls_tb_score",
    "dls_abnormal_score",
    "age",
    "sex",
    "hiv_status",
    "smear_status",
    "tb_history",
    "cough",
    "weight_loss",
    "fever",
    "night_sweats",
    "shortness_of_breath",
    "chest_pain",
];
pub const READS_HEADER: [&str; 5] = [
    "case_id",
    "reader_id",
    "tb_call",
    "abnormal_call",
    "technical_issue",
];
pub const READERS_HEADER: [&str; 3] = ["reader_id", "cohort_tag", "years_experience"];

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("{file}:{line}: column `{column}`: {message}")]
    Load {
        file: String,
        line: u64,
        column: String,
        message: String,
    },
    #[error("{file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("outlier detection needs at least 4 readers, got {0}")]
    TooFewReaders(usize),
    #[error("unknown reader `{0}`")]
    UnknownReader(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
    Unknown,
}

/// Result of a clinical test such as HIV status or sputum smear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Positive,
    Negative,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symptom {
    Cough,
    WeightLoss,
    Fever,
    NightSweats,
    ShortnessOfBreath,
    ChestPain,
}

impl Symptom {
    pub const ALL: [Symptom; 6] = [
        Symptom::Cough,
        Symptom::WeightLoss,
        Symptom::Fever,
        Symptom::NightSweats,
        Symptom::ShortnessOfBreath,
        Symptom::ChestPain,
    ];

    /// The four-symptom screen: cough, weight loss, fever, night sweats.
    pub const WHO_FOUR: [Symptom; 4] = [
        Symptom::Cough,
        Symptom::WeightLoss,
        Symptom::Fever,
        Symptom::NightSweats,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Symptom::Cough => "cough",
            Symptom::WeightLoss => "weight_loss",
            Symptom::Fever => "fever",
            Symptom::NightSweats => "night_sweats",
            Symptom::ShortnessOfBreath => "shortness_of_breath",
            Symptom::ChestPain => "chest_pain",
        }
    }
}

impl FromStr for Symptom {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Symptom::ALL
            .into_iter()
            .find(|sym| sym.as_str() == s)
            .ok_or_else(|| format!("unknown symptom `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortTag {
    IndiaBased,
    UsBased,
    Other,
}

impl CohortTag {
    pub fn as_str(self) -> &'static str {
        match self {
            CohortTag::IndiaBased => "india_based",
            CohortTag::UsBased => "us_based",
            CohortTag::Other => "other",
        }
    }
}

impl FromStr for CohortTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "india_based" => Ok(CohortTag::IndiaBased),
            "us_based" => Ok(CohortTag::UsBased),
            "other" => Ok(CohortTag::Other),
            _ => Err(format!("unknown cohort tag `{s}`")),
        }
    }
}

impl fmt::Display for CohortTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One imaged patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub dataset: String,
    pub patient_id: String,
    pub tb_label: Label,
    pub dls_tb_score: f64,
    pub dls_abnormal_score: Option<f64>,
    pub age: Option<u32>,
    pub sex: Option<Sex>,
    pub hiv_status: Option<Status>,
    pub smear_status: Option<Status>,
    pub tb_history: Option<bool>,
    /// Recorded symptom answers; a symptom missing from the map is unknown.
    pub symptoms: BTreeMap<Symptom, bool>,
}

impl CaseRecord {
    /// Minimal record with every optional attribute unknown.
    pub fn new(
        case_id: impl Into<String>,
        dataset: impl Into<String>,
        tb_label: Label,
        dls_tb_score: f64,
    ) -> Self {
        let case_id = case_id.into();
        CaseRecord {
            patient_id: case_id.clone(),
            case_id,
            dataset: dataset.into(),
            tb_label,
            dls_tb_score,
            dls_abnormal_score: None,
            age: None,
            sex: None,
            hiv_status: None,
            smear_status: None,
            tb_history: None,
            symptoms: BTreeMap::new(),
        }
    }

    pub fn symptom(&self, symptom: Symptom) -> Option<bool> {
        self.symptoms.get(&symptom).copied()
    }
}

/// One reader's call on one case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderRead {
    pub case_id: String,
    pub reader_id: String,
    pub tb_call: Label,
    pub abnormal_call: Option<bool>,
    pub technical_issue: bool,
}

impl ReaderRead {
    pub fn new(case_id: impl Into<String>, reader_id: impl Into<String>, tb_call: Label) -> Self {
        ReaderRead {
            case_id: case_id.into(),
            reader_id: reader_id.into(),
            tb_call,
            abnormal_call: None,
            technical_issue: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderInfo {
    pub reader_id: String,
    pub cohort_tag: CohortTag,
    pub years_experience: Option<u32>,
}

impl ReaderInfo {
    pub fn new(reader_id: impl Into<String>, cohort_tag: CohortTag) -> Self {
        ReaderInfo {
            reader_id: reader_id.into(),
            cohort_tag,
            years_experience: None,
        }
    }
}

/// Cases, reads and readers with referential integrity.
///
/// Excluded readers stay in `readers` and `reads`; panel-level analyses skip
/// them. Use [`Cohort::with_all_readers`] to lift the exclusion.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Cohort {
    pub cases: Vec<CaseRecord>,
    pub reads: Vec<ReaderRead>,
    pub readers: Vec<ReaderInfo>,
    pub excluded_readers: BTreeSet<String>,
}

impl Cohort {
    pub fn new(
        cases: Vec<CaseRecord>,
        reads: Vec<ReaderRead>,
        readers: Vec<ReaderInfo>,
    ) -> Result<Self, CohortError> {
        let cohort = Cohort {
            cases,
            reads,
            readers,
            excluded_readers: BTreeSet::new(),
        };
        cohort.check_integrity()?;
        Ok(cohort)
    }

    fn check_integrity(&self) -> Result<(), CohortError> {
        let mut case_ids = HashSet::with_capacity(self.cases.len());
        for case in &self.cases {
            if !case_ids.insert(case.case_id.as_str()) {
                return Err(CohortError::Integrity(format!(
                    "duplicate case_id `{}`",
                    case.case_id
                )));
            }
        }
        let mut reader_ids = HashSet::with_capacity(self.readers.len());
        for reader in &self.readers {
            if !reader_ids.insert(reader.reader_id.as_str()) {
                return Err(CohortError::Integrity(format!(
                    "duplicate reader_id `{}`",
                    reader.reader_id
                )));
            }
        }
        let mut pairs = HashSet::with_capacity(self.reads.len());
        for read in &self.reads {
            if !case_ids.contains(read.case_id.as_str()) {
                return Err(CohortError::Integrity(format!(
                    "read by `{}` references unknown case_id `{}`",
                    read.reader_id, read.case_id
                )));
            }
            if !reader_ids.contains(read.reader_id.as_str()) {
                return Err(CohortError::Integrity(format!(
                    "read of `{}` references unknown reader_id `{}`",
                    read.case_id, read.reader_id
                )));
            }
            if !pairs.insert((read.case_id.as_str(), read.reader_id.as_str())) {
                return Err(CohortError::Integrity(format!(
                    "duplicate read (case_id `{}`, reader_id `{}`)",
                    read.case_id, read.reader_id
                )));
            }
        }
        for id in &self.excluded_readers {
            if !reader_ids.contains(id.as_str()) {
                return Err(CohortError::UnknownReader(id.clone()));
            }
        }
        Ok(())
    }

    pub fn n_positive(&self) -> usize {
        self.cases
            .iter()
            .filter(|c| c.tb_label.is_positive())
            .count()
    }

    pub fn n_negative(&self) -> usize {
        self.cases.len() - self.n_positive()
    }

    pub fn datasets(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.cases.iter().map(|c| c.dataset.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    pub fn reader(&self, reader_id: &str) -> Option<&ReaderInfo> {
        self.readers.iter().find(|r| r.reader_id == reader_id)
    }

    pub fn is_excluded(&self, reader_id: &str) -> bool {
        self.excluded_readers.contains(reader_id)
    }

    /// Non-excluded readers, in file order.
    pub fn active_readers(&self) -> impl Iterator<Item = &ReaderInfo> {
        self.readers
            .iter()
            .filter(|r| !self.is_excluded(&r.reader_id))
    }

    /// Non-excluded readers carrying `tag`.
    pub fn readers_in(&self, tag: CohortTag) -> Vec<String> {
        self.active_readers()
            .filter(|r| r.cohort_tag == tag)
            .map(|r| r.reader_id.clone())
            .collect()
    }

    /// Reads by non-excluded readers.
    pub fn active_reads(&self) -> impl Iterator<Item = &ReaderRead> {
        self.reads
            .iter()
            .filter(|r| !self.is_excluded(&r.reader_id))
    }

    /// Index of reads by `(case_id, reader_id)`.
    pub fn read_index(&self) -> HashMap<(&str, &str), &ReaderRead> {
        self.reads
            .iter()
            .map(|r| ((r.case_id.as_str(), r.reader_id.as_str()), r))
            .collect()
    }

    /// Copy with `ids` added to the exclusion set.
    pub fn exclude_readers<'a, I>(&self, ids: I) -> Result<Cohort, CohortError>
    where
        I: IntoIterator<Item = &'a String>,
    {
        let mut out = self.clone();
        for id in ids {
            if self.reader(id).is_none() {
                return Err(CohortError::UnknownReader(id.clone()));
            }
            out.excluded_readers.insert(id.clone());
        }
        Ok(out)
    }

    /// Copy with the exclusion set cleared.
    pub fn with_all_readers(&self) -> Cohort {
        Cohort {
            excluded_readers: BTreeSet::new(),
            ..self.clone()
        }
    }

    /// Sub-cohort of the cases accepted by `keep`; reads follow their cases.
    pub fn filter_cases<F>(&self, mut keep: F) -> Cohort
    where
        F: FnMut(&CaseRecord) -> bool,
    {
        let cases: Vec<CaseRecord> = self.cases.iter().filter(|c| keep(c)).cloned().collect();
        let ids: HashSet<&str> = cases.iter().map(|c| c.case_id.as_str()).collect();
        let reads = self
            .reads
            .iter()
            .filter(|r| ids.contains(r.case_id.as_str()))
            .cloned()
            .collect();
        Cohort {
            cases,
            reads,
            readers: self.readers.clone(),
            excluded_readers: self.excluded_readers.clone(),
        }
    }

    pub fn dataset(&self, name: &str) -> Cohort {
        self.filter_cases(|c| c.dataset == name)
    }

    /// Algorithm scores and ground truth of every case.
    pub fn scored(&self) -> crate::roc::Scored {
        crate::roc::Scored::new(
            self.cases.iter().map(|c| c.dls_tb_score).collect(),
            self.cases
                .iter()
                .map(|c| c.tb_label.is_positive())
                .collect(),
        )
    }
}

fn load_err(file: &str, line: u64, column: &str, message: impl Into<String>) -> CohortError {
    CohortError::Load {
        file: file.to_owned(),
        line,
        column: column.to_owned(),
        message: message.into(),
    }
}

struct Row<'a> {
    file: &'a str,
    line: u64,
    header: &'static [&'static str],
    record: &'a csv::StringRecord,
}

impl<'a> Row<'a> {
    fn raw(&self, idx: usize) -> &'a str {
        &self.record[idx]
    }

    fn err(&self, idx: usize, message: impl Into<String>) -> CohortError {
        load_err(self.file, self.line, self.header[idx], message)
    }

    fn required(&self, idx: usize) -> Result<&'a str, CohortError> {
        let v = self.raw(idx);
        if v.is_empty() {
            Err(self.err(idx, "required value is empty"))
        } else {
            Ok(v)
        }
    }

    fn flag(&self, idx: usize) -> Result<Option<bool>, CohortError> {
        match self.raw(idx) {
            "" => Ok(None),
            "1" | "true" => Ok(Some(true)),
            "0" | "false" => Ok(Some(false)),
            other => Err(self.err(idx, format!("expected 0 or 1, got `{other}`"))),
        }
    }

    fn required_flag(&self, idx: usize) -> Result<bool, CohortError> {
        self.flag(idx)?
            .ok_or_else(|| self.err(idx, "required value is empty"))
    }

    fn score(&self, idx: usize) -> Result<Option<f64>, CohortError> {
        let v = self.raw(idx);
        if v.is_empty() {
            return Ok(None);
        }
        let x: f64 = v
            .parse()
            .map_err(|_| self.err(idx, format!("unparseable number `{v}`")))?;
        if !(0.0..=1.0).contains(&x) {
            return Err(self.err(idx, format!("score {x} outside [0, 1]")));
        }
        Ok(Some(x))
    }

    fn count(&self, idx: usize) -> Result<Option<u32>, CohortError> {
        let v = self.raw(idx);
        if v.is_empty() {
            return Ok(None);
        }
        v.parse()
            .map(Some)
            .map_err(|_| self.err(idx, format!("expected a non-negative integer, got `{v}`")))
    }

    fn keyword<T>(
        &self,
        idx: usize,
        parse: fn(&str) -> Option<T>,
    ) -> Result<Option<T>, CohortError> {
        let v = self.raw(idx);
        if v.is_empty() {
            return Ok(None);
        }
        parse(v)
            .map(Some)
            .ok_or_else(|| self.err(idx, format!("unrecognised value `{v}`")))
    }
}

fn parse_sex(s: &str) -> Option<Sex> {
    match s {
        "female" | "F" | "f" => Some(Sex::Female),
        "male" | "M" | "m" => Some(Sex::Male),
        "unknown" => Some(Sex::Unknown),
        _ => None,
    }
}

fn parse_status(s: &str) -> Option<Status> {
    match s {
        "positive" | "1" => Some(Status::Positive),
        "negative" | "0" => Some(Status::Negative),
        "unknown" => Some(Status::Unknown),
        _ => None,
    }
}

fn sex_str(s: Sex) -> &'static str {
    match s {
        Sex::Female => "female",
        Sex::Male => "male",
        Sex::Unknown => "unknown",
    }
}

fn status_str(s: Status) -> &'static str {
    match s {
        Status::Positive => "positive",
        Status::Negative => "negative",
        Status::Unknown => "unknown",
    }
}

/// Parse a CSV body with an exact header, calling `each` per data row.
fn parse_csv<R, F>(
    input: R,
    file: &str,
    header: &'static [&'static str],
    mut each: F,
) -> Result<(), CohortError>
where
    R: Read,
    F: FnMut(&Row<'_>) -> Result<(), CohortError>,
{
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let csv_err = |source| CohortError::Csv {
        file: file.to_owned(),
        source,
    };
    let got = rdr.headers().map_err(csv_err)?.clone();
    let got_cols: Vec<&str> = got
        .iter()
        .map(|h| h.trim_start_matches('\u{feff}'))
        .collect();
    if got_cols != header {
        return Err(load_err(
            file,
            1,
            "header",
            format!(
                "expected `{}`, got `{}`",
                header.join(","),
                got_cols.join(",")
            ),
        ));
    }
    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(csv_err)?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(load_err(
                file,
                line,
                "*",
                format!("expected {} columns, found {}", header.len(), record.len()),
            ));
        }
        each(&Row {
            file,
            line,
            header,
            record: &record,
        })?;
    }
    Ok(())
}

pub fn read_cases<R: Read>(input: R, file: &str) -> Result<Vec<CaseRecord>, CohortError> {
    let mut out = Vec::new();
    parse_csv(input, file, &CASES_HEADER, |row| {
        let tb_label = Label::from_bool(row.required_flag(3)?);
        let dls_tb_score = row
            .score(4)?
            .ok_or_else(|| row.err(4, "required value is empty"))?;
        let mut symptoms = BTreeMap::new();
        for (offset, symptom) in Symptom::ALL.into_iter().enumerate() {
            if let Some(v) = row.flag(11 + offset)? {
                symptoms.insert(symptom, v);
            }
        }
        out.push(CaseRecord {
            case_id: row.required(0)?.to_owned(),
            dataset: row.required(1)?.to_owned(),
            patient_id: row.required(2)?.to_owned(),
            tb_label,
            dls_tb_score,
            dls_abnormal_score: row.score(5)?,
            age: row.count(6)?,
            sex: row.keyword(7, parse_sex)?,
            hiv_status: row.keyword(8, parse_status)?,
            smear_status: row.keyword(9, parse_status)?,
            tb_history: row.flag(10)?,
            symptoms,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_reads<R: Read>(input: R, file: &str) -> Result<Vec<ReaderRead>, CohortError> {
    let mut out = Vec::new();
    parse_csv(input, file, &READS_HEADER, |row| {
        out.push(ReaderRead {
            case_id: row.required(0)?.to_owned(),
            reader_id: row.required(1)?.to_owned(),
            tb_call: Label::from_bool(row.required_flag(2)?),
            abnormal_call: row.flag(3)?,
            technical_issue: row.required_flag(4)?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_readers<R: Read>(input: R, file: &str) -> Result<Vec<ReaderInfo>, CohortError> {
    let mut out = Vec::new();
    parse_csv(input, file, &READERS_HEADER, |row| {
        let tag = row.required(1)?;
        out.push(ReaderInfo {
            reader_id: row.required(0)?.to_owned(),
            cohort_tag: tag.parse().map_err(|e: String| row.err(1, e))?,
            years_experience: row.count(2)?,
        });
        Ok(())
    })?;
    Ok(out)
}

fn open(path: &Path) -> Result<File, CohortError> {
    File::open(path).map_err(|source| CohortError::Io {
        file: path.display().to_string(),
        source,
    })
}

/// Load and cross-check the three cohort CSV files.
pub fn load_cohort(
    cases_path: &Path,
    reads_path: &Path,
    readers_path: &Path,
) -> Result<Cohort, CohortError> {
    let cases = read_cases(open(cases_path)?, &cases_path.display().to_string())?;
    let reads = read_reads(open(reads_path)?, &reads_path.display().to_string())?;
    let readers = read_readers(open(readers_path)?, &readers_path.display().to_string())?;
    Cohort::new(cases, reads, readers)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn bit(v: bool) -> &'static str {
    if v {
        "1"
    } else {
        "0"
    }
}

fn opt_bit(v: Option<bool>) -> &'static str {
    v.map_or("", bit)
}

fn io_err(file: &str) -> impl Fn(std::io::Error) -> CohortError + '_ {
    move |source| CohortError::Io {
        file: file.to_owned(),
        source,
    }
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

pub fn write_cases<W: Write>(cases: &[CaseRecord], out: W) -> Result<(), CohortError> {
    let file = "cases.csv";
    let mut w = csv_writer(out);
    let csv_err = |source| CohortError::Csv {
        file: file.to_owned(),
        source,
    };
    w.write_record(CASES_HEADER).map_err(csv_err)?;
    for c in cases {
        let mut row = vec![
            c.case_id.clone(),
            c.dataset.clone(),
            c.patient_id.clone(),
            bit(c.tb_label.is_positive()).to_owned(),
            c.dls_tb_score.to_string(),
            opt(c.dls_abnormal_score),
            opt(c.age),
            c.sex.map(sex_str).unwrap_or_default().to_owned(),
            c.hiv_status.map(status_str).unwrap_or_default().to_owned(),
            c.smear_status
                .map(status_str)
                .unwrap_or_default()
                .to_owned(),
            opt_bit(c.tb_history).to_owned(),
        ];
        row.extend(
            Symptom::ALL
                .iter()
                .map(|s| opt_bit(c.symptom(*s)).to_owned()),
        );
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(file))
}

pub fn write_reads<W: Write>(reads: &[ReaderRead], out: W) -> Result<(), CohortError> {
    let file = "reads.csv";
    let mut w = csv_writer(out);
    let csv_err = |source| CohortError::Csv {
        file: file.to_owned(),
        source,
    };
    w.write_record(READS_HEADER).map_err(csv_err)?;
    for r in reads {
        w.write_record([
            r.case_id.as_str(),
            r.reader_id.as_str(),
            bit(r.tb_call.is_positive()),
            opt_bit(r.abnormal_call),
            bit(r.technical_issue),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(file))
}

pub fn write_readers<W: Write>(readers: &[ReaderInfo], out: W) -> Result<(), CohortError> {
    let file = "readers.csv";
    let mut w = csv_writer(out);
    let csv_err = |source| CohortError::Csv {
        file: file.to_owned(),
        source,
    };
    w.write_record(READERS_HEADER).map_err(csv_err)?;
    for r in readers {
        w.write_record([
            r.reader_id.clone(),
            r.cohort_tag.to_string(),
            opt(r.years_experience),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(file))
}

/// Write `cases.csv`, `reads.csv` and `readers.csv` into `dir`.
pub fn save_cohort(cohort: &Cohort, dir: &Path) -> Result<(), CohortError> {
    let create = |name: &str| {
        let path = dir.join(name);
        File::create(&path).map_err(|source| CohortError::Io {
            file: path.display().to_string(),
            source,
        })
    };
    std::fs::create_dir_all(dir).map_err(io_err(&dir.display().to_string()))?;
    write_cases(&cohort.cases, create("cases.csv")?)?;
    write_reads(&cohort.reads, create("reads.csv")?)?;
    write_readers(&cohort.readers, create("readers.csv")?)
}

/// Union of cohorts with disjoint case ids. Readers shared between inputs
/// must carry identical metadata.
pub fn combine_datasets(cohorts: &[Cohort]) -> Result<Cohort, CohortError> {
    let mut cases = Vec::new();
    let mut reads = Vec::new();
    let mut readers: Vec<ReaderInfo> = Vec::new();
    let mut seen_readers: HashMap<String, usize> = HashMap::new();
    let mut excluded = BTreeSet::new();
    let mut seen_cases = HashSet::new();
    for cohort in cohorts {
        for case in &cohort.cases {
            if !seen_cases.insert(case.case_id.clone()) {
                return Err(CohortError::Integrity(format!(
                    "case_id `{}` appears in more than one cohort",
                    case.case_id
                )));
            }
        }
        cases.extend(cohort.cases.iter().cloned());
        reads.extend(cohort.reads.iter().cloned());
        for reader in &cohort.readers {
            match seen_readers.get(&reader.reader_id) {
                Some(&idx) if readers[idx] != *reader => {
                    return Err(CohortError::Integrity(format!(
                        "reader `{}` has conflicting metadata across cohorts",
                        reader.reader_id
                    )));
                }
                Some(_) => {}
                None => {
                    seen_readers.insert(reader.reader_id.clone(), readers.len());
                    readers.push(reader.clone());
                }
            }
        }
        excluded.extend(cohort.excluded_readers.iter().cloned());
    }
    let mut out = Cohort::new(cases, reads, readers)?;
    out.excluded_readers = excluded;
    Ok(out)
}

/// Fraction of positive TB calls per non-excluded reader.
pub fn reader_positive_rates(cohort: &Cohort) -> BTreeMap<String, f64> {
    let mut tallies: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for read in cohort.active_reads() {
        let t = tallies.entry(read.reader_id.as_str()).or_default();
        t.1 += 1;
        if read.tb_call.is_positive() {
            t.0 += 1;
        }
    }
    let mut out = BTreeMap::new();
    for reader in cohort.active_readers() {
        match tallies.get(reader.reader_id.as_str()) {
            Some(&(pos, total)) => {
                out.insert(reader.reader_id.clone(), pos as f64 / total as f64);
            }
            None => log::warn!(
                "reader `{}` has no reads; omitted from positive rates",
                reader.reader_id
            ),
        }
    }
    out
}

/// Quantile of sorted data by linear interpolation at position `p * (n - 1)`.
pub fn quantile_linear(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Tukey fences for a set of rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fences {
    pub q1: f64,
    pub q3: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn tukey_fences(values: &[f64]) -> Fences {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_linear(&sorted, 0.25);
    let q3 = quantile_linear(&sorted, 0.75);
    let iqr = q3 - q1;
    Fences {
        q1,
        q3,
        lower: q1 - 1.5 * iqr,
        upper: q3 + 1.5 * iqr,
    }
}

/// Readers whose rate lies strictly outside the 1.5 IQR fences.
pub fn detect_outlier_readers(
    rates: &BTreeMap<String, f64>,
) -> Result<BTreeSet<String>, CohortError> {
    if rates.len() < 4 {
        return Err(CohortError::TooFewReaders(rates.len()));
    }
    let values: Vec<f64> = rates.values().copied().collect();
    let fences = tukey_fences(&values);
    Ok(rates
        .iter()
        .filter(|(_, &r)| r < fences.lower || r > fences.upper)
        .map(|(id, _)| id.clone())
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DatasetCounts {
    pub cases: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeTally {
    pub unknown: usize,
    pub fraction_unknown: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n_cases: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_reads: usize,
    pub n_readers: usize,
    pub excluded_readers: Vec<String>,
    pub datasets: BTreeMap<String, DatasetCounts>,
    /// Per attribute: cases where the value is absent or recorded as unknown.
    pub unknown_attributes: BTreeMap<String, AttributeTally>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Summarise a cohort and list every invariant violation found.
pub fn validate(cohort: &Cohort) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |kind: &str, message: String| {
        violations.push(Violation {
            kind: kind.to_owned(),
            message,
        })
    };

    let mut datasets: BTreeMap<String, DatasetCounts> = BTreeMap::new();
    let mut case_ids = HashSet::new();
    let mut patients: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for case in &cohort.cases {
        let d = datasets.entry(case.dataset.clone()).or_default();
        d.cases += 1;
        if case.tb_label.is_positive() {
            d.positive += 1;
        } else {
            d.negative += 1;
        }
        if !case_ids.insert(case.case_id.as_str()) {
            push(
                "duplicate_case",
                format!("case_id `{}` appears more than once", case.case_id),
            );
        }
        if !(0.0..=1.0).contains(&case.dls_tb_score) {
            push(
                "score_range",
                format!(
                    "case `{}`: dls_tb_score {} outside [0, 1]",
                    case.case_id, case.dls_tb_score
                ),
            );
        }
        if let Some(s) = case.dls_abnormal_score {
            if !(0.0..=1.0).contains(&s) {
                push(
                    "score_range",
                    format!(
                        "case `{}`: dls_abnormal_score {} outside [0, 1]",
                        case.case_id, s
                    ),
                );
            }
        }
        *patients
            .entry((case.dataset.as_str(), case.patient_id.as_str()))
            .or_default() += 1;
    }
    for ((dataset, patient), n) in &patients {
        if *n > 1 {
            push(
                "duplicate_patient",
                format!("patient `{patient}` has {n} cases in dataset `{dataset}`"),
            );
        }
    }

    let mut reader_ids = HashSet::new();
    for r in &cohort.readers {
        if !reader_ids.insert(r.reader_id.as_str()) {
            push(
                "duplicate_reader",
                format!("reader_id `{}` appears more than once", r.reader_id),
            );
        }
    }
    for id in &cohort.excluded_readers {
        if !reader_ids.contains(id.as_str()) {
            push(
                "unknown_excluded_reader",
                format!("excluded reader `{id}` is not in the panel"),
            );
        }
    }
    let mut pairs = HashSet::new();
    for read in &cohort.reads {
        if !case_ids.contains(read.case_id.as_str()) {
            push(
                "dangling_case",
                format!("read references unknown case_id `{}`", read.case_id),
            );
        }
        if !reader_ids.contains(read.reader_id.as_str()) {
            push(
                "dangling_reader",
                format!("read references unknown reader_id `{}`", read.reader_id),
            );
        }
        if !pairs.insert((read.case_id.as_str(), read.reader_id.as_str())) {
            push(
                "duplicate_read",
                format!(
                    "duplicate read (case_id `{}`, reader_id `{}`)",
                    read.case_id, read.reader_id
                ),
            );
        }
    }

    let n = cohort.cases.len();
    let mut unknown_attributes = BTreeMap::new();
    let mut tally = |name: &str, unknown: usize| {
        unknown_attributes.insert(
            name.to_owned(),
            AttributeTally {
                unknown,
                fraction_unknown: if n == 0 {
                    0.0
                } else {
                    unknown as f64 / n as f64
                },
            },
        );
    };
    let count = |f: &dyn Fn(&CaseRecord) -> bool| cohort.cases.iter().filter(|c| f(c)).count();
    tally(
        "dls_abnormal_score",
        count(&|c| c.dls_abnormal_score.is_none()),
    );
    tally("age", count(&|c| c.age.is_none()));
    tally(
        "sex",
        count(&|c| matches!(c.sex, None | Some(Sex::Unknown))),
    );
    tally(
        "hiv_status",
        count(&|c| matches!(c.hiv_status, None | Some(Status::Unknown))),
    );
    tally(
        "smear_status",
        count(&|c| matches!(c.smear_status, None | Some(Status::Unknown))),
    );
    tally("tb_history", count(&|c| c.tb_history.is_none()));
    for s in Symptom::ALL {
        tally(s.as_str(), count(&|c| c.symptom(s).is_none()));
    }

    ValidationReport {
        n_cases: n,
        n_positive: cohort.n_positive(),
        n_negative: cohort.n_negative(),
        n_reads: cohort.reads.len(),
        n_readers: cohort.readers.len(),
        excluded_readers: cohort.excluded_readers.iter().cloned().collect(),
        datasets,
        unknown_attributes,
        violations,
    }
}
