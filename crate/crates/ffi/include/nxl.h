/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef NXL_H
#define NXL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Codes 2..=5 match the CLI exit codes.
 */
typedef enum {
  NXL_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  NXL_STATUS_NULL_ARGUMENT = 1,
  NXL_STATUS_CONFIG = 2,
  NXL_STATUS_DATA = 3,
  NXL_STATUS_NUMERIC = 4,
  NXL_STATUS_FIXTURE = 5,
  /**
   * The output buffer is shorter than the sequence.
   */
  NXL_STATUS_BUFFER_TOO_SMALL = 6,
  /**
   * A string argument was not valid UTF-8.
   */
  NXL_STATUS_INVALID_UTF8 = 7,
  /**
   * Internal panic; the library state is unaffected but the call failed.
   */
  NXL_STATUS_PANIC = 8,
} NxlStatus;

typedef enum {
  NXL_TASK_CLASSIFICATION = 0,
  NXL_TASK_REGRESSION = 1,
  NXL_TASK_MASKED_LM = 2,
} NxlTask;

typedef enum {
  NXL_METHOD_L2NORM = 0,
  NXL_METHOD_LOGAT = 1,
  NXL_METHOD_NORMXLOGIT = 2,
  NXL_METHOD_GRAD_NORM = 3,
  NXL_METHOD_GRAD_X_INPUT = 4,
  NXL_METHOD_INTEGRATED_GRADIENTS = 5,
  NXL_METHOD_RANDOM = 6,
} NxlMethod;

typedef enum {
  NXL_IG_BASELINE_TOKEN_ZERO = 0,
  NXL_IG_BASELINE_ALL_ZERO = 1,
} NxlIgBaseline;

typedef enum {
  NXL_OBJECTIVE_LOGIT = 0,
  NXL_OBJECTIVE_PROBABILITY = 1,
} NxlObjective;

/**
 * Opaque model handle.
 */
typedef struct NxlModel NxlModel;

/**
 * Model hyperparameters.
 */
typedef struct {
  size_t n_layers;
  size_t n_heads;
  size_t d_model;
  size_t d_ff;
  size_t vocab_size;
  size_t max_seq_len;
  size_t n_classes;
  bool has_classification_head;
  bool has_regression_head;
  bool has_language_model_head;
} NxlModelInfo;

/**
 * Options for `nxl_attribute`; start from `nxl_attribution_options_default`.
 * Negative `target_label` / `layer` select the defaults (the predicted
 * label, the last layer). `mask_position` is required for masked-LM
 * targets and ignored when negative. Enum fields must hold one of the
 * declared values.
 */
typedef struct {
  NxlMethod method;
  NxlTask task;
  int64_t mask_position;
  int64_t target_label;
  int64_t layer;
  size_t ig_steps;
  NxlIgBaseline ig_baseline;
  NxlObjective objective;
  uint64_t seed;
} NxlAttributionOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *nxl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nxl_version(void);

/**
 * Loads a model file written by `nxl gen-model`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
NxlStatus nxl_model_load(const char *path, NxlModel **out);

/**
 * Loads a model from the bytes of a model file.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes; `out` must be writable.
 */
NxlStatus nxl_model_load_json(const uint8_t *bytes, size_t len, NxlModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void nxl_model_free(NxlModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
NxlStatus nxl_model_info(const NxlModel *model, NxlModelInfo *out);

/**
 * Model prediction. For classification and masked LM `out_label` receives
 * the argmax class / token and `out_value` its probability; for regression
 * `out_label` is untouched and `out_value` receives the output.
 *
 * # Safety
 * `model` must be a live handle, `tokens` must point to `n` values and the
 * output pointers must be writable (`out_label` may be null).
 */
NxlStatus nxl_predict(const NxlModel *model,
                      const uint32_t *tokens,
                      size_t n,
                      int64_t mask_position,
                      NxlTask task,
                      size_t *out_label,
                      double *out_value);

NxlAttributionOptions nxl_attribution_options_default(void);

/**
 * Per-token scores written to `out_scores[0..n]`.
 *
 * # Safety
 * `model` must be a live handle, `tokens` must point to `n` values,
 * `options` must be readable and `out_scores` must hold `out_len` doubles.
 */
NxlStatus nxl_attribute(const NxlModel *model,
                        const uint32_t *tokens,
                        size_t n,
                        const NxlAttributionOptions *options,
                        double *out_scores,
                        size_t out_len);

/**
 * Average precision of `scores` against a 0/1 `evidence` vector.
 *
 * # Safety
 * `scores` and `evidence` must point to `n` values; `out` must be writable.
 */
NxlStatus nxl_average_precision(const double *scores,
                                const uint8_t *evidence,
                                size_t n,
                                double *out);

/**
 * Dot product of `evidence` with L1-normalised `|scores|`.
 *
 * # Safety
 * `scores` and `evidence` must point to `n` values; `out` must be writable.
 */
NxlStatus nxl_dot_alignment(const double *scores, const uint8_t *evidence, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NXL_H */
