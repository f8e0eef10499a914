#ifndef OPFLOW_H
#define OPFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum OpflowStatus {
  OPFLOW_STATUS_OK = 0,
  OPFLOW_STATUS_NULL_POINTER = 1,
  OPFLOW_STATUS_INVALID_ARGUMENT = 2,
  OPFLOW_STATUS_SHAPE_MISMATCH = 3,
  OPFLOW_STATUS_NUMERICAL = 4,
  OPFLOW_STATUS_CONFIG = 5,
  OPFLOW_STATUS_FORMAT = 6,
  OPFLOW_STATUS_IO = 7,
  OPFLOW_STATUS_BUFFER_TOO_SMALL = 8,
  OPFLOW_STATUS_PANIC = 9,
} OpflowStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct OpflowModel OpflowModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t opflow_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint written by `opflow train`. The handle must be released
 * with [`opflow_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum OpflowStatus opflow_model_load(const char *path, struct OpflowModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`opflow_model_load`] and not be used afterwards.
 */
void opflow_model_free(struct OpflowModel *model);

/**
 * Writes the channel count, spatial dimension and trainable parameter count.
 *
 * # Safety
 * `model` must be a live handle; output pointers must be valid or null.
 */
enum OpflowStatus opflow_model_info(const struct OpflowModel *model,
                                    size_t *channels,
                                    size_t *dims,
                                    size_t *parameters);

/**
 * Draws `count` functions from the model on a grid of `dims` axes with the
 * given per-axis resolution. `out` needs `count * channels * nodes` slots.
 *
 * # Safety
 * `resolution` must hold `dims` entries and `out` `out_len` writable values.
 */
enum OpflowStatus opflow_model_sample(const struct OpflowModel *model,
                                      size_t dims,
                                      const size_t *resolution,
                                      size_t count,
                                      uint64_t seed,
                                      double *out,
                                      size_t out_len);

/**
 * Maps data functions to the latent space. Writes the latent values to
 * `latent` (same length as the input) and, if `logdet` is non-null, one
 * log-determinant per sample.
 *
 * # Safety
 * `values` must hold `count * channels * nodes` values, `latent` `latent_len`
 * writable values, and `logdet` (if non-null) `count` writable values.
 */
enum OpflowStatus opflow_model_inverse(const struct OpflowModel *model,
                                       size_t dims,
                                       const size_t *resolution,
                                       size_t count,
                                       const double *values,
                                       double *latent,
                                       size_t latent_len,
                                       double *logdet);

/**
 * Maps latent functions to data space.
 *
 * # Safety
 * As for [`opflow_model_inverse`].
 */
enum OpflowStatus opflow_model_forward(const struct OpflowModel *model,
                                       size_t dims,
                                       const size_t *resolution,
                                       size_t count,
                                       const double *latent,
                                       double *out,
                                       size_t out_len);

/**
 * Exact log-likelihood of each sample at its point evaluations.
 *
 * # Safety
 * `values` must hold `count * channels * nodes` values and `out` `count`
 * writable values.
 */
enum OpflowStatus opflow_model_log_likelihood(const struct OpflowModel *model,
                                              size_t dims,
                                              const size_t *resolution,
                                              size_t count,
                                              const double *values,
                                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPFLOW_H */
