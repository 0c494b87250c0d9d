//! C ABI over the core evaluation routines.
//!
//! Every fallible function returns a [`TbStatus`]; on anything other than
//! `TB_STATUS_OK` the message is available from [`tb_last_error_message`]
//! on the same thread. Output pointers are written only on success. Panics
//! never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use tbscreen::cohort::{load_cohort, Cohort};
use tbscreen::cost::{evaluate_cost, CostInputs, Usd};
use tbscreen::inference::{
    ks_two_sample, mcnemar_exact, mrmc_orh_test, wald_noninferiority_paired, CorrectnessMatrix,
    Endpoint, NoninferiorityConfig, PairedCounts, TestStage,
};
use tbscreen::operating_point::{sens_at_spec, spec_at_sens, OperatingPoint};
use tbscreen::roc::{apply_threshold, auc_of, PerformancePoint, Scored};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TbEndpoint {
    Sensitivity = 0,
    Specificity = 1,
}

/// Opaque cohort handle.
pub struct TbCohort {
    inner: Cohort,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TbPerformance {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TbWaldResult {
    pub delta: f64,
    pub variance: f64,
    pub z: f64,
    pub p_value: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TbKsResult {
    pub statistic: f64,
    pub p_value: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TbCostInputs {
    pub prevalence: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub cost_confirmatory_test: f64,
    pub cost_cxr: f64,
    pub cost_cad: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TbCostResult {
    pub triage_positive_rate: f64,
    pub cost_per_patient_screened: f64,
    pub cost_per_case_detected: f64,
    pub naat_only_cost_per_case: f64,
    pub savings_fraction: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TbNoninferiorityConfig {
    pub margin: f64,
    pub alpha: f64,
    pub alpha_primary: f64,
}

/// `p_superiority` is NaN when the superiority stage was not reached.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TbMrmcResult {
    pub delta: f64,
    pub se: f64,
    pub df: f64,
    pub p_noninferiority: f64,
    pub p_superiority: f64,
    pub s_d_squared: f64,
    pub cov2_bar: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(message: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend(message.bytes().filter(|&b| b != 0));
    });
}

struct Failure(TbStatus, String);

impl Failure {
    fn invalid(m: impl ToString) -> Self {
        Failure(TbStatus::InvalidArgument, m.to_string())
    }

    fn data(m: impl ToString) -> Self {
        Failure(TbStatus::Data, m.to_string())
    }
}

/// Runs `f`, recording any failure or panic for `tb_last_error_message`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TbStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TbStatus::Panic
        }
    }
}

unsafe fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(TbStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(TbStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn path<'a>(p: *const c_char, name: &str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(Failure(TbStatus::NullPointer, format!("{name} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::invalid(format!("{name} is not UTF-8")))?;
    Ok(Path::new(s))
}

/// Labels are non-zero for positive cases.
unsafe fn scored(scores: *const f64, labels: *const u8, n: usize) -> Result<Scored, Failure> {
    let s = slice(scores, n, "scores")?;
    let l = slice(labels, n, "labels")?;
    Ok(Scored::new(s.to_vec(), l.iter().map(|&x| x != 0).collect()))
}

fn performance(p: &PerformancePoint, threshold: f64) -> TbPerformance {
    TbPerformance {
        threshold,
        sensitivity: p.sensitivity,
        specificity: p.specificity,
    }
}

fn matched(op: OperatingPoint) -> TbPerformance {
    performance(&op.point, op.threshold)
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length excluding the terminator. `buf` may be null to query.
///
/// # Safety
/// `buf` must be null or point to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tb_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            std::ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn tb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a cohort from the three CSV files. Free with [`tb_cohort_free`].
///
/// # Safety
/// Paths must be null or valid NUL-terminated strings; `out` must be null
/// or writable.
#[no_mangle]
pub unsafe extern "C" fn tb_cohort_load(
    cases: *const c_char,
    reads: *const c_char,
    readers: *const c_char,
    out: *mut *mut TbCohort,
) -> TbStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let (c, r, rd) = (
            path(cases, "cases")?,
            path(reads, "reads")?,
            path(readers, "readers")?,
        );
        let inner = load_cohort(c, r, rd).map_err(|e| {
            let status = if matches!(e, tbscreen::cohort::CohortError::Io { .. }) {
                TbStatus::Io
            } else {
                TbStatus::Data
            };
            Failure(status, e.to_string())
        })?;
        *out = Box::into_raw(Box::new(TbCohort { inner }));
        Ok(())
    })
}

/// # Safety
/// `cohort` must be null or a handle from [`tb_cohort_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tb_cohort_free(cohort: *mut TbCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

/// # Safety
/// `cohort` must be a live handle; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_cohort_counts(
    cohort: *const TbCohort,
    n_cases: *mut usize,
    n_positive: *mut usize,
    n_reads: *mut usize,
) -> TbStatus {
    guard(|| {
        let c = &cohort
            .as_ref()
            .ok_or_else(|| Failure(TbStatus::NullPointer, "cohort is null".into()))?
            .inner;
        let (a, b, d) = (
            out_ref(n_cases, "n_cases")?,
            out_ref(n_positive, "n_positive")?,
            out_ref(n_reads, "n_reads")?,
        );
        *a = c.cases.len();
        *b = c.n_positive();
        *d = c.reads.len();
        Ok(())
    })
}

/// AUC of the cohort's algorithm scores.
///
/// # Safety
/// `cohort` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_cohort_auc(cohort: *const TbCohort, out: *mut f64) -> TbStatus {
    guard(|| {
        let c = &cohort
            .as_ref()
            .ok_or_else(|| Failure(TbStatus::NullPointer, "cohort is null".into()))?
            .inner;
        let out = out_ref(out, "out")?;
        *out = auc_of(&c.scored()).map_err(Failure::data)?;
        Ok(())
    })
}

/// Empirical AUC with ties counted one half.
///
/// # Safety
/// `scores` and `labels` must point to `n` readable elements.
#[no_mangle]
pub unsafe extern "C" fn tb_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> TbStatus {
    guard(|| {
        let data = scored(scores, labels, n)?;
        let out = out_ref(out, "out")?;
        *out = auc_of(&data).map_err(Failure::invalid)?;
        Ok(())
    })
}

/// Rates when calling `score >= threshold` positive.
///
/// # Safety
/// As [`tb_auc`].
#[no_mangle]
pub unsafe extern "C" fn tb_apply_threshold(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    threshold: f64,
    out: *mut TbPerformance,
) -> TbStatus {
    guard(|| {
        let data = scored(scores, labels, n)?;
        let out = out_ref(out, "out")?;
        *out = performance(
            &apply_threshold(&data, threshold).map_err(Failure::invalid)?,
            threshold,
        );
        Ok(())
    })
}

/// Highest-specificity threshold whose sensitivity reaches `target`.
///
/// # Safety
/// As [`tb_auc`].
#[no_mangle]
pub unsafe extern "C" fn tb_spec_at_sens(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    target: f64,
    out: *mut TbPerformance,
) -> TbStatus {
    guard(|| {
        let data = scored(scores, labels, n)?;
        let out = out_ref(out, "out")?;
        *out = matched(spec_at_sens(&data, target).map_err(Failure::invalid)?);
        Ok(())
    })
}

/// Highest-sensitivity threshold whose specificity reaches `target`.
///
/// # Safety
/// As [`tb_auc`].
#[no_mangle]
pub unsafe extern "C" fn tb_sens_at_spec(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    target: f64,
    out: *mut TbPerformance,
) -> TbStatus {
    guard(|| {
        let data = scored(scores, labels, n)?;
        let out = out_ref(out, "out")?;
        *out = matched(sens_at_spec(&data, target).map_err(Failure::invalid)?);
        Ok(())
    })
}

/// Two-sided exact McNemar p-value from the discordant counts.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_mcnemar_exact(b: u64, c: u64, out: *mut f64) -> TbStatus {
    guard(|| {
        *out_ref(out, "out")? = mcnemar_exact(&PairedCounts {
            n10: b,
            n01: c,
            ..PairedCounts::default()
        });
        Ok(())
    })
}

/// Paired Wald noninferiority test; `n10` counts cases only the algorithm
/// got right, `n01` cases only the reader got right.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_wald_noninferiority(
    n11: u64,
    n10: u64,
    n01: u64,
    n00: u64,
    margin: f64,
    out: *mut TbWaldResult,
) -> TbStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let r = wald_noninferiority_paired(&PairedCounts { n11, n10, n01, n00 }, margin)
            .map_err(Failure::invalid)?;
        *out = TbWaldResult {
            delta: r.delta,
            variance: r.variance,
            z: r.z,
            p_value: r.p_value,
        };
        Ok(())
    })
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
///
/// # Safety
/// `a` and `b` must point to `n_a` and `n_b` readable elements.
#[no_mangle]
pub unsafe extern "C" fn tb_ks_two_sample(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    out: *mut TbKsResult,
) -> TbStatus {
    guard(|| {
        let (a, b) = (slice(a, n_a, "a")?, slice(b, n_b, "b")?);
        let out = out_ref(out, "out")?;
        let r = ks_two_sample(a, b).map_err(Failure::invalid)?;
        *out = TbKsResult {
            statistic: r.statistic,
            p_value: r.p_value,
        };
        Ok(())
    })
}

/// Two-stage triage cost per patient and per detected case.
///
/// # Safety
/// `inputs` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tb_cost(inputs: *const TbCostInputs, out: *mut TbCostResult) -> TbStatus {
    guard(|| {
        let i = *inputs
            .as_ref()
            .ok_or_else(|| Failure(TbStatus::NullPointer, "inputs is null".into()))?;
        let out = out_ref(out, "out")?;
        let r = evaluate_cost(&CostInputs {
            prevalence: i.prevalence,
            sensitivity: i.sensitivity,
            specificity: i.specificity,
            cost_confirmatory_test: Usd::new(i.cost_confirmatory_test),
            cost_cxr: Usd::new(i.cost_cxr),
            cost_cad: Usd::new(i.cost_cad),
        })
        .map_err(Failure::invalid)?;
        *out = TbCostResult {
            triage_positive_rate: r.triage_positive_rate,
            cost_per_patient_screened: r.cost_per_patient_screened,
            cost_per_case_detected: r.cost_per_case_detected,
            naat_only_cost_per_case: r.naat_only_cost_per_case,
            savings_fraction: r.savings_fraction,
        };
        Ok(())
    })
}

/// The default margin 0.10, alpha 0.025 and primary alpha 0.0125.
#[no_mangle]
pub extern "C" fn tb_noninferiority_default() -> TbNoninferiorityConfig {
    let d = NoninferiorityConfig::default();
    TbNoninferiorityConfig {
        margin: d.margin,
        alpha: d.alpha,
        alpha_primary: d.alpha_primary,
    }
}

/// MRMC noninferiority test on a row-major `n_rows x n_cases` 0/1
/// correctness matrix. Row 0 is the algorithm, rows 1.. the readers.
/// `primary` selects the primary alpha for the superiority gate.
///
/// # Safety
/// `matrix` must point to `n_rows * n_cases` readable bytes; `config` must
/// be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tb_mrmc(
    matrix: *const u8,
    n_rows: usize,
    n_cases: usize,
    endpoint: TbEndpoint,
    config: *const TbNoninferiorityConfig,
    primary: bool,
    out: *mut TbMrmcResult,
) -> TbStatus {
    guard(|| {
        let total = n_rows
            .checked_mul(n_cases)
            .ok_or_else(|| Failure::invalid("matrix size overflows"))?;
        let cells = slice(matrix, total, "matrix")?;
        let cfg = *config
            .as_ref()
            .ok_or_else(|| Failure(TbStatus::NullPointer, "config is null".into()))?;
        let out = out_ref(out, "out")?;
        if cells.iter().any(|&c| c > 1) {
            return Err(Failure::invalid("matrix entries must be 0 or 1"));
        }
        let endpoint = match endpoint {
            TbEndpoint::Sensitivity => Endpoint::Sensitivity,
            TbEndpoint::Specificity => Endpoint::Specificity,
        };
        let rows = if n_cases == 0 {
            vec![Vec::new(); n_rows]
        } else {
            cells.chunks(n_cases).map(<[u8]>::to_vec).collect()
        };
        let m = CorrectnessMatrix::from_rows(endpoint, rows).map_err(Failure::invalid)?;
        let config = NoninferiorityConfig {
            margin: cfg.margin,
            alpha: cfg.alpha,
            alpha_primary: cfg.alpha_primary,
            ..NoninferiorityConfig::default()
        };
        let stage = if primary {
            TestStage::Primary
        } else {
            TestStage::Secondary
        };
        let r = mrmc_orh_test(&m, &config, stage).map_err(Failure::invalid)?;
        *out = TbMrmcResult {
            delta: r.delta,
            se: r.se,
            df: r.df,
            p_noninferiority: r.p_noninferiority,
            p_superiority: r.p_superiority.unwrap_or(f64::NAN),
            s_d_squared: r.s_d_squared,
            cov2_bar: r.cov2_bar,
        };
        Ok(())
    })
}
