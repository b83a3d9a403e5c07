#ifndef SGNET_H
#define SGNET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum SgnetStatus {
  SGNET_STATUS_OK = 0,
  SGNET_STATUS_NULL_POINTER = 1,
  SGNET_STATUS_INVALID_ARGUMENT = 2,
  SGNET_STATUS_IO = 3,
  SGNET_STATUS_CHECKPOINT = 4,
  SGNET_STATUS_DIMENSION = 5,
  SGNET_STATUS_NON_FINITE = 6,
  SGNET_STATUS_BUFFER_TOO_SMALL = 7,
  SGNET_STATUS_PANIC = 8,
} SgnetStatus;

/**
 * Loaded model plus the data settings it was trained with.
 */
typedef struct SgnetModel SgnetModel;

/**
 * Sizes a caller needs to shape inputs and outputs.
 */
typedef struct SgnetModelInfo {
  /**
   * Observed rows the model consumes.
   */
  size_t obs_len;
  /**
   * Predicted steps per proposal.
   */
  size_t pred_len;
  /**
   * Columns per position row: 2 for centroids, 4 for boxes.
   */
  size_t output_dim;
  /**
   * Auxiliary columns per row; 0 when the model takes none.
   */
  size_t aux_dim;
  /**
   * Proposals produced when `k` is 0.
   */
  size_t default_k;
  /**
   * 1 for the sampling model, 0 for the single-proposal model.
   */
  uint8_t stochastic;
} SgnetModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call on this thread.
 */
const char *sgnet_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sgnet_version(void);

/**
 * Loads a checkpoint written by `sgnet train`. On success `*out` owns a new
 * handle; on failure it is set to null.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
 */
enum SgnetStatus sgnet_model_load(const char *path, struct SgnetModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`sgnet_model_load`] and not be used afterwards.
 */
void sgnet_model_free(struct SgnetModel *model);

/**
 * Fills `*out` with the model's sizes.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum SgnetStatus sgnet_model_info(const struct SgnetModel *model, struct SgnetModelInfo *out);

/**
 * Predicts one agent's future from its position history.
 *
 * `history` holds `rows × output_dim` values in original coordinates,
 * oldest first, with `rows ≥ obs_len`; rows before the last `obs_len`
 * only feed the motion features. `aux` is null when the model takes no
 * auxiliary input, otherwise `rows × aux_dim` values. `step_secs` is the
 * time between rows. `k = 0` uses the model's proposal count;
 * single-proposal models always produce one.
 *
 * Writes `K × pred_len × output_dim` values to `out` (proposal-major) and
 * their count to `*written`. If `out_len` is too small nothing is written
 * except the required count.
 *
 * # Safety
 * Pointers must be valid for the lengths described above.
 */
enum SgnetStatus sgnet_predict(const struct SgnetModel *model,
                               const double *history,
                               size_t rows,
                               const double *aux,
                               double step_secs,
                               size_t k,
                               uint64_t seed,
                               double *out,
                               size_t out_len,
                               size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SGNET_H */
