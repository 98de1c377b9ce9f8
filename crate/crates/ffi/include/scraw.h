#ifndef SCRAW_H
#define SCRAW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ScrawStatus {
  SCRAW_STATUS_OK = 0,
  SCRAW_STATUS_INVALID_ARGUMENT = 1,
  SCRAW_STATUS_PARSE_ERROR = 2,
  SCRAW_STATUS_IO_ERROR = 3,
  SCRAW_STATUS_INVALID_INPUT = 4,
  SCRAW_STATUS_DIMENSION = 5,
  SCRAW_STATUS_NUMERIC = 6,
  /**
   * The pair callback asked to stop.
   */
  SCRAW_STATUS_ABORTED = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  SCRAW_STATUS_PANIC = 8,
} ScrawStatus;

typedef enum ScrawEstimator {
  SCRAW_ESTIMATOR_AVERAGE = 0,
  SCRAW_ESTIMATOR_SQRT = 1,
} ScrawEstimator;

/**
 * Count matrix, genes by cells.
 */
typedef struct ScrawMatrix ScrawMatrix;

/**
 * Fitted model parameters together with the chance-of-expression table.
 */
typedef struct ScrawModel ScrawModel;

/**
 * Counts in (11, 10, 01, 00) order: expressed in both, first only,
 * second only, neither.
 */
typedef struct ScrawCoexTable {
  uint64_t observed[4];
  double expected[4];
  uint64_t m;
} ScrawCoexTable;

typedef struct ScrawCoexResult {
  double w;
  double r;
  double p_value;
} ScrawCoexResult;

typedef struct ScrawPair {
  uint32_t g1;
  uint32_t g2;
  struct ScrawCoexTable table;
  struct ScrawCoexResult stats;
} ScrawPair;

/**
 * Receives a batch of pair results. Calls are serialized, never concurrent,
 * but may come from any thread. Return nonzero to stop the run.
 */
typedef int32_t (*ScrawPairCallback)(const struct ScrawPair *pairs, size_t len, void *user);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *scraw_last_error(void);

/**
 * φ(x) = E√X for X ~ Poisson(x), x ≥ 0.
 *
 * # Safety
 * `out` must be valid for writing one double.
 */
enum ScrawStatus scraw_phi(double x, double *out);

/**
 * τ(x) = Var √X for X ~ Poisson(x).
 *
 * # Safety
 * `out` must be valid for writing one double.
 */
enum ScrawStatus scraw_tau(double x, double *out);

/**
 * ψ(y) = τ(φ⁻¹(y)) + y², 0 ≤ y.
 *
 * # Safety
 * `out` must be valid for writing one double.
 */
enum ScrawStatus scraw_psi(double y, double *out);

/**
 * Second derivative of ψ.
 *
 * # Safety
 * `out` must be valid for writing one double.
 */
enum ScrawStatus scraw_psi_second(double y, double *out);

/**
 * Upper tail of the chi-square distribution.
 *
 * # Safety
 * `out` must be valid for writing one double.
 */
enum ScrawStatus scraw_chi2_sf(double x, uint32_t dof, double *out);

/**
 * Builds a matrix from row-major counts, `n_genes` rows of `n_cells`.
 *
 * # Safety
 * `counts` must hold `n_genes * n_cells` values and `out` must be writable.
 */
enum ScrawStatus scraw_matrix_from_dense(const uint32_t *counts,
                                         size_t n_genes,
                                         size_t n_cells,
                                         struct ScrawMatrix **out);

/**
 * Loads a MatrixMarket (.mtx) or dense TSV file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` must be writable.
 */
enum ScrawStatus scraw_matrix_load(const char *path, struct ScrawMatrix **out);

/**
 * # Safety
 * `m` must be a live matrix handle.
 */
size_t scraw_matrix_n_genes(const struct ScrawMatrix *m);

/**
 * # Safety
 * `m` must be a live matrix handle.
 */
size_t scraw_matrix_n_cells(const struct ScrawMatrix *m);

/**
 * # Safety
 * `m` must come from this library and not be used afterwards.
 */
void scraw_matrix_free(struct ScrawMatrix *m);

/**
 * Estimates ν and λ, fits per-gene dispersion, and tabulates chances of
 * expression. The model is tied to the dimensions of `m`.
 *
 * # Safety
 * `m` must be a live matrix handle and `out` must be writable.
 */
enum ScrawStatus scraw_model_fit(const struct ScrawMatrix *m,
                                 enum ScrawEstimator estimator,
                                 struct ScrawModel **out);

/**
 * Copies the per-cell efficiencies into `out` (`len` = cells).
 *
 * # Safety
 * `model` must be live and `out` valid for `len` doubles.
 */
enum ScrawStatus scraw_model_nu(const struct ScrawModel *model, double *out, size_t len);

/**
 * Copies the per-gene expression levels into `out` (`len` = genes).
 *
 * # Safety
 * `model` must be live and `out` valid for `len` doubles.
 */
enum ScrawStatus scraw_model_lambda(const struct ScrawModel *model, double *out, size_t len);

/**
 * Copies the per-gene dispersions into `out` (`len` = genes).
 *
 * # Safety
 * `model` must be live and `out` valid for `len` doubles.
 */
enum ScrawStatus scraw_model_dispersion(const struct ScrawModel *model, double *out, size_t len);

/**
 * Copies the chance of expression of gene `g` in every cell (`len` = cells).
 *
 * # Safety
 * `model` must be live and `out` valid for `len` doubles.
 */
enum ScrawStatus scraw_model_rho_row(const struct ScrawModel *model,
                                     size_t g,
                                     double *out,
                                     size_t len);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void scraw_model_free(struct ScrawModel *model);

/**
 * Test statistics for a filled table. `m` is taken from the observed counts,
 * and the expected entries must be non-negative and sum to it.
 *
 * # Safety
 * `table` must be readable and `out` writable.
 */
enum ScrawStatus scraw_coex_stats(const struct ScrawCoexTable *table, struct ScrawCoexResult *out);

/**
 * Table and statistics for one gene pair.
 *
 * # Safety
 * Handles must be live and belong together; `table` and `out` writable.
 */
enum ScrawStatus scraw_coex_pair(const struct ScrawMatrix *m,
                                 const struct ScrawModel *model,
                                 size_t g1,
                                 size_t g2,
                                 struct ScrawCoexTable *table,
                                 struct ScrawCoexResult *out);

/**
 * Every unordered pair g1 < g2, in batches and in no fixed order. `tile`
 * 0 uses the default; `threads` 0 uses all cores. The number of results
 * delivered is written to `emitted` when it is not NULL.
 *
 * # Safety
 * Handles must be live and belong together; `callback` must be safe to call
 * from any thread with `user`.
 */
enum ScrawStatus scraw_coex_all(const struct ScrawMatrix *m,
                                const struct ScrawModel *model,
                                size_t tile,
                                size_t threads,
                                ScrawPairCallback callback,
                                void *user,
                                uint64_t *emitted);

/**
 * Per-gene S and GDI over all pairs. `s_out` and `gdi_out` each hold one
 * value per gene.
 *
 * # Safety
 * Handles must be live and belong together; buffers valid for `len` doubles.
 */
enum ScrawStatus scraw_gdi(const struct ScrawMatrix *m,
                           const struct ScrawModel *model,
                           double alpha,
                           double floor,
                           size_t threads,
                           double *s_out,
                           double *gdi_out,
                           size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCRAW_H */
