//! Evaluation toolkit for a standalone diagnostic screening algorithm
//! compared against reader panels.
//!
//! The crate works on already-computed case scores and reader calls loaded
//! from CSV files. It covers empirical ROC analysis with bootstrap intervals,
//! operating-point selection, MRMC noninferiority testing, paired per-reader
//! tests, Kolmogorov-Smirnov distribution-shift tests, subgroup analyses and
//! a two-stage triage cost model. Synthetic reader panels with known
//! operating characteristics are available for calibration.

pub mod cohort;
pub mod cost;
pub mod inference;
pub mod operating_point;
pub mod report;
pub mod rng;
pub mod roc;
pub mod subgroup;
pub mod synth;

pub use cohort::{CaseRecord, Cohort, CohortError, Label, ReaderInfo, ReaderRead};
pub use roc::{PerformancePoint, RocCurve, Scored};
