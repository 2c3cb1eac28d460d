#ifndef MEMDGM_H
#define MEMDGM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum MemdgmStatus {
  MEMDGM_STATUS_OK = 0,
  MEMDGM_STATUS_NULL_POINTER = 1,
  MEMDGM_STATUS_INVALID_ARGUMENT = 2,
  MEMDGM_STATUS_IO = 3,
  MEMDGM_STATUS_FORMAT = 4,
  MEMDGM_STATUS_NUMERIC = 5,
  MEMDGM_STATUS_SHAPE = 6,
  MEMDGM_STATUS_PANIC = 7,
} MemdgmStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct MemdgmModel MemdgmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *memdgm_version(void);

/**
 * Message for the most recent failure on this thread, or NULL. Valid until
 * the next failing call on the same thread.
 */
const char *memdgm_last_error(void);

/**
 * Loads a checkpoint file. On success `*out` owns a handle to be released
 * with [`memdgm_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MemdgmStatus memdgm_model_load(const char *path, struct MemdgmModel **out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`memdgm_model_load`] and not be used afterwards.
 */
void memdgm_model_free(struct MemdgmModel *model);

/**
 * Pixels per image.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum MemdgmStatus memdgm_model_input_dim(const struct MemdgmModel *model, size_t *out);

/**
 * Latent dimensionality.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum MemdgmStatus memdgm_model_latent_dim(const struct MemdgmModel *model, size_t *out);

/**
 * Draws `n` prior samples and writes their decoded pixel means into `out`
 * (`n * input_dim` values).
 *
 * # Safety
 * `out` must point to `out_len` writable floats.
 */
enum MemdgmStatus memdgm_generate(const struct MemdgmModel *model,
                                  size_t n,
                                  uint64_t seed,
                                  float *out,
                                  size_t out_len);

/**
 * Importance-sampled log-likelihood of each of `n` images with `k` samples,
 * written to `out` (`n` values, nats).
 *
 * # Safety
 * `x` must hold `n * input_dim` floats and `out` `n` writable doubles.
 */
enum MemdgmStatus memdgm_log_likelihood(const struct MemdgmModel *model,
                                        const float *x,
                                        size_t n,
                                        size_t k,
                                        uint64_t seed,
                                        double *out);

/**
 * Fills in missing pixels. `missing` flags each pixel (nonzero = missing);
 * observed pixels are copied through unchanged. Writes the final images to
 * `out` (`n * input_dim` values).
 *
 * # Safety
 * `x`, `missing` and `out` must each hold `n * input_dim` elements.
 */
enum MemdgmStatus memdgm_impute(const struct MemdgmModel *model,
                                const float *x,
                                const uint8_t *missing,
                                size_t n,
                                size_t steps,
                                uint64_t seed,
                                float *out);

/**
 * Closed-form trainable parameter count of a named architecture
 * (`mnist-mem`, `mnist-vae`, `mnist-vae-530`, `mnist-vis`, `ocr-mem`,
 * `ocr-vae`, `frey-mem`).
 *
 * # Safety
 * `name` must be NUL-terminated and `out` writable.
 */
enum MemdgmStatus memdgm_count_params(const char *name, uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEMDGM_H */
