#ifndef MTMIL_H
#define MTMIL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum MtmilStatus {
  MTMIL_STATUS_OK = 0,
  MTMIL_STATUS_NULL_POINTER = 1,
  /**
   * A string argument is not valid UTF-8.
   */
  MTMIL_STATUS_INVALID_STRING = 2,
  /**
   * An index or length argument is out of range.
   */
  MTMIL_STATUS_INVALID_ARGUMENT = 3,
  /**
   * The output buffer is too small; the required size was written back.
   */
  MTMIL_STATUS_BUFFER_TOO_SMALL = 4,
  MTMIL_STATUS_CONFIG = 10,
  /**
   * I/O, format or shape problem in the inputs.
   */
  MTMIL_STATUS_DATA = 11,
  MTMIL_STATUS_INFEASIBLE = 12,
  MTMIL_STATUS_NUMERIC = 13,
  MTMIL_STATUS_PANIC = 99,
} MtmilStatus;

/**
 * One-tailed paired tests of `a > b`.
 */
typedef enum MtmilPairedTest {
  MTMIL_PAIRED_TEST_T = 0,
  MTMIL_PAIRED_TEST_WILCOXON = 1,
} MtmilPairedTest;

/**
 * One bag of tile features.
 */
typedef struct MtmilBag MtmilBag;

/**
 * The fold models of one training run, used as an ensemble.
 */
typedef struct MtmilModel MtmilModel;

/**
 * Cohort manifest of a feature store directory; bags are read on demand.
 */
typedef struct MtmilStore MtmilStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mtmil_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *mtmil_last_error_message(void);

/**
 * Opens the feature store directory `dir` and reads its manifest.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MtmilStatus mtmil_store_open(const char *dir, struct MtmilStore **out);

/**
 * # Safety
 * `store` must come from [`mtmil_store_open`] and not be used afterwards. NULL is ignored.
 */
void mtmil_store_free(struct MtmilStore *store);

/**
 * Number of bags in the manifest.
 *
 * # Safety
 * `store` must be a live handle and `out` writable.
 */
enum MtmilStatus mtmil_store_len(const struct MtmilStore *store, size_t *out);

/**
 * Copies the id of bag `index` (manifest order) into `buf`.
 *
 * # Safety
 * `store` must be a live handle; `buf` must hold `cap` bytes; `len_out` may be NULL.
 */
enum MtmilStatus mtmil_store_bag_id(const struct MtmilStore *store,
                                    size_t index,
                                    char *buf,
                                    size_t cap,
                                    size_t *len_out);

/**
 * Reads bag `bag_id` from the store.
 *
 * # Safety
 * `store` must be a live handle, `bag_id` NUL-terminated, `out` writable.
 */
enum MtmilStatus mtmil_store_read_bag(const struct MtmilStore *store,
                                      const char *bag_id,
                                      struct MtmilBag **out);

/**
 * Builds a bag from `n_tiles * dim` row-major features. The id keys the
 * inference tile sample, so use the store id to reproduce CLI scores.
 *
 * # Safety
 * `bag_id` must be NUL-terminated and `features` hold `n_tiles * dim` floats.
 */
enum MtmilStatus mtmil_bag_new(const char *bag_id,
                               const float *features,
                               size_t n_tiles,
                               size_t dim,
                               struct MtmilBag **out);

/**
 * # Safety
 * `bag` must come from this library and not be used afterwards. NULL is ignored.
 */
void mtmil_bag_free(struct MtmilBag *bag);

/**
 * Tile count and feature width of a bag.
 *
 * # Safety
 * `bag` must be a live handle; both outputs writable.
 */
enum MtmilStatus mtmil_bag_shape(const struct MtmilBag *bag, size_t *n_tiles, size_t *dim);

/**
 * Borrowed row-major features, valid while the bag lives. NULL for a NULL bag.
 *
 * # Safety
 * `bag` must be a live handle or NULL.
 */
const float *mtmil_bag_features(const struct MtmilBag *bag);

/**
 * Loads the fold models written by `mtmil train --out dir`.
 *
 * # Safety
 * `dir` must be NUL-terminated and `out` writable.
 */
enum MtmilStatus mtmil_model_load(const char *dir, struct MtmilModel **out);

/**
 * # Safety
 * `model` must come from [`mtmil_model_load`] and not be used afterwards. NULL is ignored.
 */
void mtmil_model_free(struct MtmilModel *model);

/**
 * Number of tasks (output heads) and the expected feature width.
 *
 * # Safety
 * `model` must be a live handle; both outputs writable.
 */
enum MtmilStatus mtmil_model_shape(const struct MtmilModel *model, size_t *n_tasks, size_t *dim);

/**
 * Copies the target id of head `task` into `buf`.
 *
 * # Safety
 * `model` must be a live handle; `buf` must hold `cap` bytes; `len_out` may be NULL.
 */
enum MtmilStatus mtmil_model_task_id(const struct MtmilModel *model,
                                     size_t task,
                                     char *buf,
                                     size_t cap,
                                     size_t *len_out);

/**
 * Ensemble scores for one bag: the mean positive probability over fold models
 * per task into `probs` (`n_tasks` values) and fold-0 attention per tile into
 * `attention` (`n_tiles` values, 0 for tiles left out of the inference sample).
 *
 * # Safety
 * `model` and `bag` must be live handles; the buffers must hold the stated counts.
 */
enum MtmilStatus mtmil_model_predict(const struct MtmilModel *model,
                                     const struct MtmilBag *bag,
                                     double *probs,
                                     size_t n_tasks,
                                     double *attention,
                                     size_t n_tiles);

/**
 * Exact ROC-AUC with tied scores counted as half; `labels` nonzero means positive.
 *
 * # Safety
 * `scores` and `labels` must hold `n` values; `out` writable.
 */
enum MtmilStatus mtmil_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * One-tailed paired test that `a` exceeds `b`.
 *
 * # Safety
 * `a` and `b` must hold `n` values; both outputs writable.
 */
enum MtmilStatus mtmil_paired_test(const double *a,
                                   const double *b,
                                   size_t n,
                                   enum MtmilPairedTest test,
                                   double *statistic,
                                   double *p_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTMIL_H */
