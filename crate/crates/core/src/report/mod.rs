//! Analysis orchestration and the on-disk report bundle.
//!
//! Layout under the output directory:
//! `validation.json`, `roc/`, `tables/`, `tests/`, `cost/`, `report.md` and
//! `manifest.json`. Two runs with the same config and seed write identical
//! bytes.

mod analysis;
mod bundle;
mod config;
mod ops;

use std::path::PathBuf;

use thiserror::Error;

pub use analysis::{run, verify_run, MatchMode, RunOptions, RunOutcome, Section};
pub use bundle::{verify_bundle, Format, Location, Manifest, ManifestEntry, VerifyReport};
pub use config::{
    AbnormalityConfig, CostConfig, DevicePerformance, InputPaths, OutlierConfig, RunConfig,
};
pub use ops::{
    histogram, BootStatistic, Filter, Operation, Selection, Slice, Target, ThresholdSpec,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Cohort(#[from] crate::cohort::CohortError),
    #[error(transparent)]
    Roc(#[from] crate::roc::RocError),
    #[error(transparent)]
    OperatingPoint(#[from] crate::operating_point::OperatingPointError),
    #[error(transparent)]
    Inference(#[from] crate::inference::InferenceError),
    #[error(transparent)]
    Cost(#[from] crate::cost::CostError),
    #[error(transparent)]
    Subgroup(#[from] crate::subgroup::SubgroupError),
}

impl ReportError {
    /// 2 for usage and configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ReportError::Config(_) => 2,
            _ => 1,
        }
    }
}
