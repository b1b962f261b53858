#ifndef LOGOCAF_H
#define LOGOCAF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LgcfStatus {
  LGCF_STATUS_OK = 0,
  LGCF_STATUS_NULL_POINTER = 1,
  LGCF_STATUS_INVALID_ARGUMENT = 2,
  LGCF_STATUS_CONFIG = 3,
  LGCF_STATUS_SHAPE_MISMATCH = 4,
  LGCF_STATUS_DIVISIBILITY = 5,
  LGCF_STATUS_IO = 6,
  LGCF_STATUS_FORMAT = 7,
  LGCF_STATUS_NUMERICAL = 8,
  LGCF_STATUS_BUFFER_TOO_SMALL = 9,
  LGCF_STATUS_PANIC = 10,
} LgcfStatus;

/**
 * Opaque model handle; release with [`lgcf_model_free`].
 */
typedef struct LgcfModel LgcfModel;

typedef struct LgcfMetrics {
  double oa;
  double aa;
  double kappa;
} LgcfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *lgcf_last_error(void);

/**
 * Crate version as a static NUL-terminated string.
 */
const char *lgcf_version(void);

/**
 * Build the small configuration used for synthetic scenes.
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum LgcfStatus lgcf_model_create_toy(size_t hsi_bands,
                                      size_t x_bands,
                                      size_t classes,
                                      uint64_t seed,
                                      struct LgcfModel **out);

/**
 * Build from `key = value` model configuration text; missing keys take
 * their defaults and unknown keys are rejected.
 *
 * # Safety
 * `config` must be a NUL-terminated string; `out` valid for a pointer write.
 */
enum LgcfStatus lgcf_model_from_config(const char *config, struct LgcfModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid for a pointer write.
 */
enum LgcfStatus lgcf_model_load(const char *path, struct LgcfModel **out);

/**
 * Save with `f64` (or, when `single_precision` is set, `f32`) storage.
 *
 * # Safety
 * `model` must come from this library; `path` a NUL-terminated string.
 */
enum LgcfStatus lgcf_model_save(const struct LgcfModel *model,
                                const char *path,
                                bool single_precision);

/**
 * Trainable parameter count, HSI bands, X bands and classes; any output
 * pointer may be null.
 *
 * # Safety
 * `model` must come from this library; non-null outputs valid for writes.
 */
enum LgcfStatus lgcf_model_info(const struct LgcfModel *model,
                                size_t *params,
                                size_t *hsi_bands,
                                size_t *x_bands,
                                size_t *classes);

/**
 * Logits for one `height×width` tile.
 *
 * `hsi` holds `height·width·hsi_bands` values and `x` holds
 * `height·width·x_bands`; `logits` receives `height·width·classes` values
 * and `logits_len` is its capacity.
 *
 * # Safety
 * Buffers must be valid for the stated lengths.
 */
enum LgcfStatus lgcf_model_forward(const struct LgcfModel *model,
                                   const double *hsi,
                                   const double *x,
                                   size_t height,
                                   size_t width,
                                   double *logits,
                                   size_t logits_len);

/**
 * Release a handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle from this library, freed once.
 */
void lgcf_model_free(struct LgcfModel *model);

/**
 * OA, AA and kappa of `n` predicted against `n` reference labels; pixels
 * whose reference equals `ignore` are skipped.
 *
 * # Safety
 * `pred` and `reference` must hold `n` values; `out` valid for a write.
 */
enum LgcfStatus lgcf_metrics(const int64_t *pred,
                             const int64_t *reference,
                             size_t n,
                             size_t classes,
                             int64_t ignore,
                             struct LgcfMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOGOCAF_H */
