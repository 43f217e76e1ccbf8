#ifndef DPMM_H
#define DPMM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DpmmStatus {
  DPMM_STATUS_OK = 0,
  DPMM_STATUS_NULL_POINTER = 1,
  DPMM_STATUS_INVALID_ARGUMENT = 2,
  DPMM_STATUS_DATA_ERROR = 3,
  DPMM_STATUS_RUN_ERROR = 4,
  DPMM_STATUS_BUFFER_TOO_SMALL = 5,
  DPMM_STATUS_PANIC = 6,
} DpmmStatus;

/**
 * A loaded or generated dataset.
 */
typedef struct DpmmDataset DpmmDataset;

/**
 * The result of a finished run.
 */
typedef struct DpmmRun DpmmRun;

/**
 * Run settings. Obtain defaults from [`dpmm_run_options_default`].
 */
typedef struct DpmmRunOptions {
  uint32_t workers;
  uint64_t iterations;
  uint32_t sweeps_per_cycle;
  uint32_t pooled_iters;
  uint32_t subcomp_cap;
  uint64_t seed;
  /**
   * Overrides the family string's concentration when positive.
   */
  double alpha;
  bool shuffle;
} DpmmRunOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *dpmm_last_error(void);

/**
 * Generates isotropic Gaussian clusters with truth labels.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DpmmStatus dpmm_dataset_generate(size_t clusters,
                                      size_t min_size,
                                      size_t max_size,
                                      size_t dim,
                                      double sigma,
                                      double half_width,
                                      uint64_t seed,
                                      struct DpmmDataset **out);

/**
 * Copies `rows * dim` row-major values. `counts` selects count data
 * (multinomial) instead of real vectors.
 *
 * # Safety
 * `values` must point to `rows * dim` doubles; `out` must be valid.
 */
enum DpmmStatus dpmm_dataset_from_rows(const double *values,
                                       size_t rows,
                                       size_t dim,
                                       bool counts,
                                       struct DpmmDataset **out);

/**
 * Loads the binary dataset format, or CSV when the path ends in `.csv`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
enum DpmmStatus dpmm_dataset_load(const char *path, struct DpmmDataset **out);

/**
 * Number of rows (0 for a null handle).
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t dpmm_dataset_len(const struct DpmmDataset *ds);

/**
 * Row dimension (0 for a null handle).
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t dpmm_dataset_dim(const struct DpmmDataset *ds);

/**
 * Copies the truth labels. `len` receives the row count; pass a null
 * `out` with `cap` 0 to query it.
 *
 * # Safety
 * `ds` must be a live handle; `out` must hold `cap` entries.
 */
enum DpmmStatus dpmm_dataset_truth(const struct DpmmDataset *ds,
                                   uint64_t *out,
                                   size_t cap,
                                   size_t *len);

/**
 * # Safety
 * `ds` must be null or a handle not freed before.
 */
void dpmm_dataset_free(struct DpmmDataset *ds);

struct DpmmRunOptions dpmm_run_options_default(void);

/**
 * Fits the dataset. `mode` is `serial`, `sync-prog`, `sync-pooled` or
 * `async`; `family` is e.g. `gaussian:dim=2,sigma=1,sigma0=30`. A null
 * `options` uses the defaults.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum DpmmStatus dpmm_run(const struct DpmmDataset *ds,
                         const char *mode,
                         const char *family,
                         const struct DpmmRunOptions *options,
                         struct DpmmRun **out);

/**
 * Number of components in the final pool (0 for a null handle).
 *
 * # Safety
 * `run` must be null or a live run handle.
 */
size_t dpmm_run_num_components(const struct DpmmRun *run);

/**
 * Total messages exchanged, including setup and teardown.
 *
 * # Safety
 * `run` must be null or a live run handle.
 */
uint64_t dpmm_run_total_messages(const struct DpmmRun *run);

/**
 * Copies the final label of each row. `len` receives the row count.
 *
 * # Safety
 * `run` must be a live handle; `out` must hold `cap` entries.
 */
enum DpmmStatus dpmm_run_labels(const struct DpmmRun *run, uint64_t *out, size_t cap, size_t *len);

/**
 * Collapsed log-likelihood of the final labels on `ds`.
 *
 * # Safety
 * Handles must be live; `out` valid.
 */
enum DpmmStatus dpmm_run_loglik(const struct DpmmRun *run,
                                const struct DpmmDataset *ds,
                                bool include_crp,
                                double *out);

/**
 * # Safety
 * `run` must be null or a handle not freed before.
 */
void dpmm_run_free(struct DpmmRun *run);

/**
 * Variation of information (nats) between two labelings of `n` rows.
 *
 * # Safety
 * `a` and `b` must point to `n` labels; `out` must be valid.
 */
enum DpmmStatus dpmm_variation_of_information(const uint64_t *a,
                                              const uint64_t *b,
                                              size_t n,
                                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPMM_H */
