//! In-memory output bundle: CSV tables and JSON documents whose numeric
//! cells are registered in a provenance manifest.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::ops::Operation;
use super::ReportError;
use crate::cohort::Cohort;

/// How a number is rendered in a table cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Format {
    /// Proportion shown as a percentage with 2 decimals.
    Percent,
    /// 4 decimals, floored at `<0.0001`.
    PValue,
    Fixed {
        digits: usize,
    },
    Count,
    /// A JSON number, written as serialized.
    Json,
}

impl Format {
    pub fn render(self, v: f64) -> String {
        match self {
            Format::Percent => format!("{:.2}%", v * 100.0),
            Format::PValue if v < 0.0001 => "<0.0001".into(),
            Format::PValue => format!("{v:.4}"),
            Format::Fixed { digits } => format!("{v:.digits$}"),
            Format::Count => format!("{}", v.round() as i64),
            Format::Json => Json::from(v).to_string(),
        }
    }
}

pub const NA: &str = "NA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Location {
    /// `line` is 1-based and counts the header.
    Csv {
        line: usize,
        row: String,
        column: String,
    },
    Json {
        pointer: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub location: Location,
    pub display: String,
    pub value: f64,
    pub format: Format,
    /// Index into [`Manifest::operations`].
    pub operation: usize,
    /// JSON pointer into the operation's output.
    pub field: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub versions: BTreeMap<String, String>,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, InputRecord>,
    pub excluded_readers: Vec<String>,
    pub notes: Vec<String>,
    pub operations: Vec<Operation>,
    pub entries: Vec<ManifestEntry>,
}

struct PendingCell {
    column: String,
    display: String,
    value: f64,
    format: Format,
    operation: Operation,
    field: String,
}

/// One CSV row under construction.
pub struct Row {
    key: String,
    cells: BTreeMap<String, String>,
    pending: Vec<PendingCell>,
}

impl Row {
    pub fn new(key: impl Into<String>) -> Self {
        Row {
            key: key.into(),
            cells: BTreeMap::new(),
            pending: Vec::new(),
        }
    }

    pub fn text(&mut self, column: &str, s: impl Into<String>) -> &mut Self {
        self.cells.insert(column.to_string(), s.into());
        self
    }

    /// Cell taken from `field` of `doc`, the output of `op`; `NA` when the
    /// field is missing or null.
    pub fn num(
        &mut self,
        column: &str,
        format: Format,
        op: &Operation,
        doc: &Json,
        field: &str,
    ) -> Option<f64> {
        match doc.pointer(field).and_then(Json::as_f64) {
            Some(value) => {
                let display = format.render(value);
                self.cells.insert(column.to_string(), display.clone());
                self.pending.push(PendingCell {
                    column: column.to_string(),
                    display,
                    value,
                    format,
                    operation: op.clone(),
                    field: field.to_string(),
                });
                Some(value)
            }
            None => {
                self.cells.insert(column.to_string(), NA.into());
                None
            }
        }
    }
}

pub struct Table {
    file: String,
    header: Vec<String>,
    rows: Vec<Row>,
}

impl Table {
    pub fn new(file: impl Into<String>, header: &[&str]) -> Self {
        Table {
            file: file.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Row) {
        for column in row.cells.keys() {
            assert!(
                self.header.contains(column),
                "column `{column}` not in {}",
                self.file
            );
        }
        self.rows.push(row);
    }
}

#[derive(Default)]
pub struct Bundle {
    files: BTreeMap<String, Vec<u8>>,
    operations: Vec<Operation>,
    op_index: HashMap<String, usize>,
    entries: Vec<ManifestEntry>,
    pub notes: Vec<String>,
    cache: HashMap<String, Json>,
}

fn op_key(op: &Operation) -> String {
    serde_json::to_string(op).expect("operations serialize")
}

impl Bundle {
    /// Notes keep first-seen order; repeats are dropped.
    pub fn note(&mut self, message: impl Into<String>) {
        let message = message.into();
        if !self.notes.contains(&message) {
            log::info!("{message}");
            self.notes.push(message);
        }
    }

    /// Evaluate `op` once per bundle.
    pub fn eval(&mut self, cohort: &Cohort, op: &Operation) -> Result<Json, ReportError> {
        let key = op_key(op);
        if let Some(v) = self.cache.get(&key) {
            return Ok(v.clone());
        }
        let v = op.evaluate(cohort)?;
        self.cache.insert(key, v.clone());
        Ok(v)
    }

    fn register(&mut self, op: &Operation) -> usize {
        let key = op_key(op);
        if let Some(&i) = self.op_index.get(&key) {
            return i;
        }
        self.operations.push(op.clone());
        self.op_index.insert(key, self.operations.len() - 1);
        self.operations.len() - 1
    }

    pub fn add_table(&mut self, table: Table) -> Result<(), ReportError> {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let csv_err = |e: csv::Error| ReportError::Data(e.to_string());
        writer.write_record(&table.header).map_err(csv_err)?;
        for (i, row) in table.rows.into_iter().enumerate() {
            let record: Vec<&str> = table
                .header
                .iter()
                .map(|h| row.cells.get(h).map_or("", String::as_str))
                .collect();
            writer.write_record(&record).map_err(csv_err)?;
            for p in row.pending {
                let operation = self.register(&p.operation);
                self.entries.push(ManifestEntry {
                    file: table.file.clone(),
                    location: Location::Csv {
                        line: i + 2,
                        row: row.key.clone(),
                        column: p.column,
                    },
                    display: p.display,
                    value: p.value,
                    format: p.format,
                    operation,
                    field: p.field,
                });
            }
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| ReportError::Data(e.to_string()))?;
        self.files.insert(table.file, bytes);
        Ok(())
    }

    /// Record `doc[pointer]` as produced by `op` at `field`; returns the
    /// pointer for chaining.
    pub fn json_entry(
        &mut self,
        file: &str,
        doc: &Json,
        pointer: &str,
        op: &Operation,
        field: &str,
    ) {
        if let Some(value) = doc.pointer(pointer).and_then(Json::as_f64) {
            let operation = self.register(op);
            self.entries.push(ManifestEntry {
                file: file.to_string(),
                location: Location::Json {
                    pointer: pointer.to_string(),
                },
                display: doc
                    .pointer(pointer)
                    .map(Json::to_string)
                    .unwrap_or_default(),
                value,
                format: Format::Json,
                operation,
                field: field.to_string(),
            });
        }
    }

    pub fn add_json(&mut self, file: &str, doc: &Json) -> Result<(), ReportError> {
        let mut bytes =
            serde_json::to_vec_pretty(doc).map_err(|e| ReportError::Data(e.to_string()))?;
        bytes.push(b'\n');
        self.files.insert(file.to_string(), bytes);
        Ok(())
    }

    pub fn add_text(&mut self, file: &str, text: String) {
        self.files.insert(file.to_string(), text.into_bytes());
    }

    pub fn manifest(
        &self,
        config_sha256: String,
        seed: u64,
        inputs: BTreeMap<String, InputRecord>,
        excluded_readers: Vec<String>,
    ) -> Manifest {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            versions: BTreeMap::from([(
                env!("CARGO_PKG_NAME").to_string(),
                env!("CARGO_PKG_VERSION").to_string(),
            )]),
            config_sha256,
            seed,
            inputs,
            excluded_readers,
            notes: self.notes.clone(),
            operations: self.operations.clone(),
            entries: self.entries.clone(),
        }
    }

    /// Write every file plus `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path, manifest: &Manifest) -> Result<Vec<PathBuf>, ReportError> {
        let mut written = Vec::new();
        let mut put = |rel: &str, bytes: &[u8]| -> Result<(), ReportError> {
            let path = dir.join(rel);
            let io = |source| ReportError::Io {
                path: path.clone(),
                source,
            };
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(io)?;
            }
            std::fs::write(&path, bytes).map_err(io)?;
            written.push(path);
            Ok(())
        };
        for (rel, bytes) in &self.files {
            put(rel, bytes)?;
        }
        let mut m =
            serde_json::to_vec_pretty(manifest).map_err(|e| ReportError::Data(e.to_string()))?;
        m.push(b'\n');
        put("manifest.json", &m)?;
        Ok(written)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checked: usize,
    pub mismatches: Vec<String>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Recompute every manifest entry from `cohort` and compare with the value
/// logged and the text written in the bundle.
pub fn verify_bundle(dir: &Path, cohort: &Cohort) -> Result<VerifyReport, ReportError> {
    let read = |rel: &str| {
        let path = dir.join(rel);
        std::fs::read(&path).map_err(|source| ReportError::Io { path, source })
    };
    let manifest: Manifest = serde_json::from_slice(&read("manifest.json")?)
        .map_err(|e| ReportError::Data(format!("manifest: {e}")))?;
    let cohort = cohort.exclude_readers(manifest.excluded_readers.iter())?;

    let mut outputs: HashMap<usize, Json> = HashMap::new();
    let mut csv_files: HashMap<String, (Vec<String>, Vec<csv::StringRecord>)> = HashMap::new();
    let mut json_files: HashMap<String, Json> = HashMap::new();
    let mut mismatches = Vec::new();

    for (i, e) in manifest.entries.iter().enumerate() {
        let op = manifest.operations.get(e.operation).ok_or_else(|| {
            ReportError::Data(format!("entry {i} names missing operation {}", e.operation))
        })?;
        if let std::collections::hash_map::Entry::Vacant(slot) = outputs.entry(e.operation) {
            slot.insert(op.evaluate(&cohort)?);
        }
        let Some(value) = outputs[&e.operation]
            .pointer(&e.field)
            .and_then(Json::as_f64)
        else {
            mismatches.push(format!(
                "{} {:?}: field {} missing on re-derivation",
                e.file, e.location, e.field
            ));
            continue;
        };
        if !close(value, e.value) {
            mismatches.push(format!(
                "{} {:?}: logged {} re-derived {}",
                e.file, e.location, e.value, value
            ));
        }
        match &e.location {
            Location::Csv { line, column, .. } => {
                if !csv_files.contains_key(&e.file) {
                    let bytes = read(&e.file)?;
                    let mut r = csv::Reader::from_reader(bytes.as_slice());
                    let header = r
                        .headers()
                        .map_err(|err| ReportError::Data(err.to_string()))?
                        .iter()
                        .map(String::from)
                        .collect();
                    let records = r
                        .records()
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|err| ReportError::Data(err.to_string()))?;
                    csv_files.insert(e.file.clone(), (header, records));
                }
                let (header, records) = &csv_files[&e.file];
                let cell = header
                    .iter()
                    .position(|h| h == column)
                    .and_then(|c| records.get(line.wrapping_sub(2)).and_then(|r| r.get(c)));
                if cell != Some(e.display.as_str()) {
                    mismatches.push(format!(
                        "{} line {line} {column}: file has {cell:?}, manifest {}",
                        e.file, e.display
                    ));
                }
                if e.format.render(value) != e.display {
                    mismatches.push(format!(
                        "{} line {line} {column}: re-derived renders {}, manifest {}",
                        e.file,
                        e.format.render(value),
                        e.display
                    ));
                }
            }
            Location::Json { pointer } => {
                if !json_files.contains_key(&e.file) {
                    let doc = serde_json::from_slice(&read(&e.file)?)
                        .map_err(|err| ReportError::Data(format!("{}: {err}", e.file)))?;
                    json_files.insert(e.file.clone(), doc);
                }
                match json_files[&e.file].pointer(pointer).and_then(Json::as_f64) {
                    Some(v) if close(v, value) => {}
                    other => mismatches.push(format!(
                        "{} {pointer}: file has {other:?}, re-derived {value}",
                        e.file
                    )),
                }
            }
        }
    }
    Ok(VerifyReport {
        checked: manifest.entries.len(),
        mismatches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats() {
        assert_eq!(Format::Percent.render(15.0 / 17.0), "88.24%");
        assert_eq!(Format::PValue.render(0.00004), "<0.0001");
        assert_eq!(Format::PValue.render(0.0001), "0.0001");
        assert_eq!(Format::PValue.render(0.03857), "0.0386");
        assert_eq!(Format::Fixed { digits: 3 }.render(0.9), "0.900");
        assert_eq!(Format::Count.render(217.0), "217");
        assert_eq!(Format::Json.render(0.5), "0.5");
    }

    #[test]
    fn table_lines_and_entries() {
        let mut b = Bundle::default();
        let op = Operation::ReaderRates;
        let doc = serde_json::json!({"r1": 0.25, "r2": null});
        let mut t = Table::new("t.csv", &["reader", "rate"]);
        for r in ["r1", "r2"] {
            let mut row = Row::new(r);
            row.text("reader", r);
            row.num("rate", Format::Percent, &op, &doc, &format!("/{r}"));
            t.push(row);
        }
        b.add_table(t).unwrap();
        assert_eq!(
            String::from_utf8(b.files["t.csv"].clone()).unwrap(),
            "reader,rate\nr1,25.00%\nr2,NA\n"
        );
        assert_eq!(b.entries.len(), 1);
        assert!(matches!(
            &b.entries[0].location,
            Location::Csv { line: 2, .. }
        ));
        assert_eq!(b.operations.len(), 1);
    }
}
