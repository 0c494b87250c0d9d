//! Obuchowski-Rockette-Hillis comparison of a standalone algorithm with the
//! average of a reader panel on a binary endpoint.
//!
//! With per-reader differences `d_j = θ_alg - θ_j`, the average difference
//! is treated as a single correlated-readings estimate:
//!
//! ```text
//! SE² = S_d² / J + max(Cov2, 0)
//! df  = (J - 1) · (1 + J · max(Cov2, 0) / S_d²)²
//! ```
//!
//! where `S_d²` is the sample variance of the `d_j` and `Cov2` the mean
//! jackknife covariance between differences of distinct readers.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::{
    jackknife_covariance, CorrectnessMatrix, Endpoint, InferenceError, NoninferiorityConfig,
    TestStage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MrmcFlag {
    /// The mean inter-reader covariance was negative and truncated to 0.
    Cov2Truncated,
    /// SE was zero; p-values follow the sign of the test statistic numerator.
    ZeroStandardError,
    /// S_d² was zero, so df fell back to J - 1.
    SingularDf,
}

/// Variance components feeding the test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrhComponents {
    pub endpoint: Endpoint,
    /// Mean difference, oriented so that positive favours the algorithm.
    pub delta: f64,
    pub s_d_squared: f64,
    pub cov2_bar: f64,
    pub n_readers: usize,
    pub n_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrmcResult {
    pub endpoint: Endpoint,
    pub delta: f64,
    pub se: f64,
    pub df: f64,
    pub p_noninferiority: f64,
    /// Only computed when the noninferiority p-value clears `alpha_gate`.
    pub p_superiority: Option<f64>,
    pub s_d_squared: f64,
    pub cov2_bar: f64,
    pub n_readers: usize,
    pub n_cases: usize,
    pub margin: f64,
    pub alpha_gate: f64,
    pub flags: Vec<MrmcFlag>,
}

/// Serialized form of one comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrmcDocument {
    pub endpoint: Endpoint,
    pub delta: f64,
    pub se: f64,
    pub df: f64,
    pub p_ni: f64,
    pub p_sup: Option<f64>,
    pub flags: Vec<MrmcFlag>,
    pub components: ComponentsDocument,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentsDocument {
    pub s_d_squared: f64,
    pub cov2_bar: f64,
}

impl MrmcResult {
    pub fn document(&self) -> MrmcDocument {
        MrmcDocument {
            endpoint: self.endpoint,
            delta: self.delta,
            se: self.se,
            df: self.df,
            p_ni: self.p_noninferiority,
            p_sup: self.p_superiority,
            flags: self.flags.clone(),
            components: ComponentsDocument {
                s_d_squared: self.s_d_squared,
                cov2_bar: self.cov2_bar,
            },
        }
    }
}

fn t_upper_tail(t: f64, df: f64) -> f64 {
    // Beyond this the t and normal tails agree to well under 1e-6.
    if df > 1e7 {
        return Normal::standard().sf(t);
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive and finite");
    dist.sf(t).clamp(0.0, 1.0)
}

/// Variance components from a correctness matrix (row 0 = algorithm).
pub fn orh_components(
    matrix: &CorrectnessMatrix,
    higher_is_better: bool,
) -> Result<OrhComponents, InferenceError> {
    let j = matrix.n_readers();
    let n = matrix.n_cases();
    if j < 2 {
        return Err(InferenceError::TooSmall {
            what: "readers",
            need: 2,
            got: j,
        });
    }
    if n < 2 {
        return Err(InferenceError::TooSmall {
            what: "cases",
            need: 2,
            got: n,
        });
    }
    let sign = if higher_is_better { 1.0 } else { -1.0 };
    let alg = &matrix.rows[0];
    let diffs: Vec<Vec<f64>> = matrix.rows[1..]
        .iter()
        .map(|row| {
            alg.iter()
                .zip(row)
                .map(|(&a, &r)| sign * (a as f64 - r as f64))
                .collect()
        })
        .collect();
    // Integer difference counts keep S_d² exactly zero when all readers tie.
    let counts: Vec<i64> = diffs.iter().map(|v| v.iter().sum::<f64>() as i64).collect();
    let total: i64 = counts.iter().sum();
    let (ji, jf, nf) = (j as i64, j as f64, n as f64);
    let delta = total as f64 / (jf * nf);
    let spread: i64 = counts.iter().map(|&c| (ji * c - total).pow(2)).sum();
    let s_d_squared = spread as f64 / (jf * jf * nf * nf * (jf - 1.0));

    let mut cov_sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..j {
        for b in (a + 1)..j {
            cov_sum += jackknife_covariance(&diffs[a], &diffs[b])?;
            pairs += 1;
        }
    }
    Ok(OrhComponents {
        endpoint: matrix.endpoint,
        delta,
        s_d_squared,
        cov2_bar: cov_sum / pairs as f64,
        n_readers: j,
        n_cases: n,
    })
}

/// Test statistics and p-values from variance components.
pub fn orh_inference(components: &OrhComponents, margin: f64, alpha_gate: f64) -> MrmcResult {
    let OrhComponents {
        endpoint,
        delta,
        s_d_squared,
        cov2_bar,
        n_readers,
        n_cases,
    } = *components;
    let jf = n_readers as f64;
    let mut flags = Vec::new();
    let cov2 = if cov2_bar < 0.0 {
        flags.push(MrmcFlag::Cov2Truncated);
        0.0
    } else {
        cov2_bar
    };
    let se = (s_d_squared / jf + cov2).sqrt();
    let df = if s_d_squared > 0.0 {
        (jf - 1.0) * (1.0 + jf * cov2 / s_d_squared).powi(2)
    } else {
        flags.push(MrmcFlag::SingularDf);
        jf - 1.0
    };

    let tail = |numerator: f64, flags: &mut Vec<MrmcFlag>| {
        if se > 0.0 {
            t_upper_tail(numerator / se, df)
        } else {
            if !flags.contains(&MrmcFlag::ZeroStandardError) {
                flags.push(MrmcFlag::ZeroStandardError);
            }
            if numerator > 0.0 {
                0.0
            } else {
                1.0
            }
        }
    };
    let p_noninferiority = tail(delta + margin, &mut flags);
    let p_superiority = (p_noninferiority < alpha_gate).then(|| tail(delta, &mut flags));
    flags.sort();

    MrmcResult {
        endpoint,
        delta,
        se,
        df,
        p_noninferiority,
        p_superiority,
        s_d_squared,
        cov2_bar,
        n_readers,
        n_cases,
        margin,
        alpha_gate,
        flags,
    }
}

/// Noninferiority (then superiority) of the algorithm against the panel mean.
pub fn mrmc_orh_test(
    matrix: &CorrectnessMatrix,
    config: &NoninferiorityConfig,
    stage: TestStage,
) -> Result<MrmcResult, InferenceError> {
    config.validate()?;
    let components = orh_components(matrix, config.higher_is_better)?;
    Ok(orh_inference(
        &components,
        config.margin,
        stage.alpha(config),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointOutcome {
    NotNoninferior,
    Noninferior,
    Superior,
}

impl EndpointOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            EndpointOutcome::NotNoninferior => "not_noninferior",
            EndpointOutcome::Noninferior => "noninferior",
            EndpointOutcome::Superior => "superior",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub sensitivity: EndpointOutcome,
    pub specificity: EndpointOutcome,
}

pub fn classify_endpoint(
    p_noninferiority: f64,
    p_superiority: Option<f64>,
    config: &NoninferiorityConfig,
) -> EndpointOutcome {
    if p_noninferiority >= config.alpha_primary {
        EndpointOutcome::NotNoninferior
    } else if p_superiority.is_some_and(|p| p < config.alpha) {
        EndpointOutcome::Superior
    } else {
        EndpointOutcome::Noninferior
    }
}

/// Bonferroni-gated noninferiority on both endpoints, each followed by an
/// uncorrected superiority test when noninferiority holds.
pub fn sequential_primary_analysis(
    sensitivity: &MrmcResult,
    specificity: &MrmcResult,
    config: &NoninferiorityConfig,
) -> TestOutcome {
    TestOutcome {
        sensitivity: classify_endpoint(
            sensitivity.p_noninferiority,
            sensitivity.p_superiority,
            config,
        ),
        specificity: classify_endpoint(
            specificity.p_noninferiority,
            specificity.p_superiority,
            config,
        ),
    }
}
