#ifndef TBSCREEN_H
#define TBSCREEN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TbStatus {
  TB_STATUS_OK = 0,
  TB_STATUS_NULL_POINTER = 1,
  TB_STATUS_INVALID_ARGUMENT = 2,
  TB_STATUS_IO = 3,
  TB_STATUS_DATA = 4,
  TB_STATUS_PANIC = 5,
} TbStatus;

typedef enum TbEndpoint {
  TB_ENDPOINT_SENSITIVITY = 0,
  TB_ENDPOINT_SPECIFICITY = 1,
} TbEndpoint;

/**
 * Opaque cohort handle.
 */
typedef struct TbCohort TbCohort;

typedef struct TbPerformance {
  double threshold;
  double sensitivity;
  double specificity;
} TbPerformance;

typedef struct TbWaldResult {
  double delta;
  double variance;
  double z;
  double p_value;
} TbWaldResult;

typedef struct TbKsResult {
  double statistic;
  double p_value;
} TbKsResult;

typedef struct TbCostInputs {
  double prevalence;
  double sensitivity;
  double specificity;
  double cost_confirmatory_test;
  double cost_cxr;
  double cost_cad;
} TbCostInputs;

typedef struct TbCostResult {
  double triage_positive_rate;
  double cost_per_patient_screened;
  double cost_per_case_detected;
  double naat_only_cost_per_case;
  double savings_fraction;
} TbCostResult;

typedef struct TbNoninferiorityConfig {
  double margin;
  double alpha;
  double alpha_primary;
} TbNoninferiorityConfig;

/**
 * `p_superiority` is NaN when the superiority stage was not reached.
 */
typedef struct TbMrmcResult {
  double delta;
  double se;
  double df;
  double p_noninferiority;
  double p_superiority;
  double s_d_squared;
  double cov2_bar;
} TbMrmcResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the full
 * message length excluding the terminator. `buf` may be null to query.
 *
 * # Safety
 * `buf` must be null or point to at least `len` writable bytes.
 */
uintptr_t tb_last_error_message(char *buf, uintptr_t len);

/**
 * Static NUL-terminated version string.
 */
const char *tb_version(void);

/**
 * Loads a cohort from the three CSV files. Free with [`tb_cohort_free`].
 *
 * # Safety
 * Paths must be null or valid NUL-terminated strings; `out` must be null
 * or writable.
 */
enum TbStatus tb_cohort_load(const char *cases,
                             const char *reads,
                             const char *readers,
                             struct TbCohort **out);

/**
 * # Safety
 * `cohort` must be null or a handle from [`tb_cohort_load`] not yet freed.
 */
void tb_cohort_free(struct TbCohort *cohort);

/**
 * # Safety
 * `cohort` must be a live handle; output pointers must be writable.
 */
enum TbStatus tb_cohort_counts(const struct TbCohort *cohort,
                               uintptr_t *n_cases,
                               uintptr_t *n_positive,
                               uintptr_t *n_reads);

/**
 * AUC of the cohort's algorithm scores.
 *
 * # Safety
 * `cohort` must be a live handle; `out` must be writable.
 */
enum TbStatus tb_cohort_auc(const struct TbCohort *cohort, double *out);

/**
 * Empirical AUC with ties counted one half.
 *
 * # Safety
 * `scores` and `labels` must point to `n` readable elements.
 */
enum TbStatus tb_auc(const double *scores, const uint8_t *labels, uintptr_t n, double *out);

/**
 * Rates when calling `score >= threshold` positive.
 *
 * # Safety
 * As [`tb_auc`].
 */
enum TbStatus tb_apply_threshold(const double *scores,
                                 const uint8_t *labels,
                                 uintptr_t n,
                                 double threshold,
                                 struct TbPerformance *out);

/**
 * Highest-specificity threshold whose sensitivity reaches `target`.
 *
 * # Safety
 * As [`tb_auc`].
 */
enum TbStatus tb_spec_at_sens(const double *scores,
                              const uint8_t *labels,
                              uintptr_t n,
                              double target,
                              struct TbPerformance *out);

/**
 * Highest-sensitivity threshold whose specificity reaches `target`.
 *
 * # Safety
 * As [`tb_auc`].
 */
enum TbStatus tb_sens_at_spec(const double *scores,
                              const uint8_t *labels,
                              uintptr_t n,
                              double target,
                              struct TbPerformance *out);

/**
 * Two-sided exact McNemar p-value from the discordant counts.
 *
 * # Safety
 * `out` must be writable.
 */
enum TbStatus tb_mcnemar_exact(uint64_t b, uint64_t c, double *out);

/**
 * Paired Wald noninferiority test; `n10` counts cases only the algorithm
 * got right, `n01` cases only the reader got right.
 *
 * # Safety
 * `out` must be writable.
 */
enum TbStatus tb_wald_noninferiority(uint64_t n11,
                                     uint64_t n10,
                                     uint64_t n01,
                                     uint64_t n00,
                                     double margin,
                                     struct TbWaldResult *out);

/**
 * Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
 *
 * # Safety
 * `a` and `b` must point to `n_a` and `n_b` readable elements.
 */
enum TbStatus tb_ks_two_sample(const double *a,
                               uintptr_t n_a,
                               const double *b,
                               uintptr_t n_b,
                               struct TbKsResult *out);

/**
 * Two-stage triage cost per patient and per detected case.
 *
 * # Safety
 * `inputs` must be readable and `out` writable.
 */
enum TbStatus tb_cost(const struct TbCostInputs *inputs, struct TbCostResult *out);

/**
 * The default margin 0.10, alpha 0.025 and primary alpha 0.0125.
 */
struct TbNoninferiorityConfig tb_noninferiority_default(void);

/**
 * MRMC noninferiority test on a row-major `n_rows x n_cases` 0/1
 * correctness matrix. Row 0 is the algorithm, rows 1.. the readers.
 * `primary` selects the primary alpha for the superiority gate.
 *
 * # Safety
 * `matrix` must point to `n_rows * n_cases` readable bytes; `config` must
 * be readable and `out` writable.
 */
enum TbStatus tb_mrmc(const uint8_t *matrix,
                      uintptr_t n_rows,
                      uintptr_t n_cases,
                      enum TbEndpoint endpoint,
                      const struct TbNoninferiorityConfig *config,
                      bool primary,
                      struct TbMrmcResult *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TBSCREEN_H */
