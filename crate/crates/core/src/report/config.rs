//! Run configuration, read from TOML. Input paths resolve against the
//! directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ReportError;
use crate::cohort::CohortTag;
use crate::cost::{CostInputs, Usd};
use crate::inference::NoninferiorityConfig;
use crate::roc::BootstrapConfig;
use crate::subgroup::{StratumConfig, StratumSpec};

pub const DEFAULT_PRIMARY_POINT: &str = "prespecified";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub cases: PathBuf,
    pub reads: PathBuf,
    pub readers: PathBuf,
}

impl Default for InputPaths {
    fn default() -> Self {
        InputPaths {
            cases: "cases.csv".into(),
            reads: "reads.csv".into(),
            readers: "readers.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DevicePerformance {
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub prevalence_min: f64,
    pub prevalence_max: f64,
    pub prevalence_step: f64,
    pub cost_confirmatory_test: f64,
    pub cost_cxr: f64,
    pub cost_cad: f64,
    pub who_target: DevicePerformance,
    pub lower_spec_device: DevicePerformance,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            prevalence_min: 0.01,
            prevalence_max: 0.10,
            prevalence_step: 0.01,
            cost_confirmatory_test: 13.06,
            cost_cxr: 1.49,
            cost_cad: 0.0,
            who_target: DevicePerformance {
                sensitivity: 0.90,
                specificity: 0.70,
            },
            lower_spec_device: DevicePerformance {
                sensitivity: 0.90,
                specificity: 0.65,
            },
        }
    }
}

impl CostConfig {
    pub fn inputs(&self, performance: DevicePerformance) -> CostInputs {
        CostInputs {
            prevalence: self.prevalence_max,
            sensitivity: performance.sensitivity,
            specificity: performance.specificity,
            cost_confirmatory_test: Usd::new(self.cost_confirmatory_test),
            cost_cxr: Usd::new(self.cost_cxr),
            cost_cad: Usd::new(self.cost_cad),
        }
    }

    /// Everyone goes straight to the confirmatory test.
    pub fn naat_only(&self) -> CostInputs {
        CostInputs {
            cost_cxr: Usd::new(0.0),
            cost_cad: Usd::new(0.0),
            ..self.inputs(DevicePerformance {
                sensitivity: 1.0,
                specificity: 0.0,
            })
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbnormalityConfig {
    /// Readers whose abnormal calls define the abnormality reference.
    pub ground_truth_readers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierConfig {
    pub enabled: bool,
    /// Excluded regardless of rates, e.g. readers with incomplete reads.
    pub manual_exclusions: Vec<String>,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        OutlierConfig {
            enabled: true,
            manual_exclusions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub inputs: InputPaths,
    pub output_dir: PathBuf,
    /// Named thresholds; names are unique by construction.
    pub operating_points: BTreeMap<String, f64>,
    pub primary_operating_point: String,
    pub primary_reader_cohort: CohortTag,
    /// Datasets pooled into the `combined` row; all datasets when absent.
    pub combined_datasets: Option<Vec<String>>,
    /// Datasets for per-reader matching; all datasets when absent.
    pub per_reader_datasets: Option<Vec<String>>,
    pub noninferiority: NoninferiorityConfig,
    pub bootstrap: BootstrapConfig,
    pub strata: Vec<StratumConfig>,
    /// Add HIV, smear, sex, TB history and symptom-screen strata.
    pub default_strata: bool,
    /// Age band edges; observed deciles when absent.
    pub age_edges: Option<Vec<f64>>,
    pub min_stratum_cases: usize,
    pub abnormality: AbnormalityConfig,
    pub cost: CostConfig,
    pub outliers: OutlierConfig,
    pub histogram_bin_width: f64,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 20210101,
            inputs: InputPaths::default(),
            output_dir: "out".into(),
            operating_points: BTreeMap::from([
                (DEFAULT_PRIMARY_POINT.to_string(), 0.45),
                ("high_sensitivity".to_string(), 0.25),
                ("south_africa_alt".to_string(), 0.685),
            ]),
            primary_operating_point: DEFAULT_PRIMARY_POINT.into(),
            primary_reader_cohort: CohortTag::IndiaBased,
            combined_datasets: None,
            per_reader_datasets: None,
            noninferiority: NoninferiorityConfig::default(),
            bootstrap: BootstrapConfig::default(),
            strata: Vec::new(),
            default_strata: true,
            age_edges: None,
            min_stratum_cases: 10,
            abnormality: AbnormalityConfig::default(),
            cost: CostConfig::default(),
            outliers: OutlierConfig::default(),
            histogram_bin_width: 0.05,
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ReportError> {
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e| ReportError::Config(e.to_string()))?;
        config.base_dir = base_dir.to_path_buf();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        RunConfig::from_toml(&text, &base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn primary_threshold(&self) -> f64 {
        self.operating_points[&self.primary_operating_point]
    }

    /// Bootstrap settings with the master seed.
    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            seed: self.seed,
            ..self.bootstrap
        }
    }

    pub fn stratum_specs(&self) -> Result<Vec<StratumSpec>, ReportError> {
        self.strata
            .iter()
            .map(|c| {
                let mut spec =
                    StratumSpec::try_from(c).map_err(|e| ReportError::Config(e.to_string()))?;
                if c.min_cases.is_none() {
                    spec.min_cases = self.min_stratum_cases;
                }
                Ok(spec)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        let bad = |m: String| Err(ReportError::Config(m));
        if self.operating_points.is_empty() {
            return bad("at least one operating point is required".into());
        }
        if !self
            .operating_points
            .contains_key(&self.primary_operating_point)
        {
            return bad(format!(
                "primary operating point `{}` is not among the named points",
                self.primary_operating_point
            ));
        }
        if let Some((name, t)) = self.operating_points.iter().find(|(_, t)| !t.is_finite()) {
            return bad(format!(
                "operating point `{name}` threshold {t} is not finite"
            ));
        }
        self.noninferiority
            .validate()
            .map_err(|e| ReportError::Config(e.to_string()))?;
        if self.bootstrap.n_resamples == 0
            || !(self.bootstrap.level > 0.0 && self.bootstrap.level < 1.0)
        {
            return bad("bootstrap needs n_resamples >= 1 and 0 < level < 1".into());
        }
        if !(self.histogram_bin_width > 0.0 && self.histogram_bin_width <= 1.0) {
            return bad(format!(
                "histogram_bin_width {} outside (0, 1]",
                self.histogram_bin_width
            ));
        }
        let gt = &self.abnormality.ground_truth_readers;
        if !gt.is_empty() && gt.len() < 3 {
            return bad(format!(
                "abnormality needs at least 3 ground-truth readers, got {}",
                gt.len()
            ));
        }
        self.stratum_specs()?;
        Ok(())
    }
}
