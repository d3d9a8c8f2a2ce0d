#ifndef PAL_H
#define PAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Selects one side of a model.
 */
typedef enum PalModality {
  PAL_MODALITY_VISION = 0,
  PAL_MODALITY_LANGUAGE = 1,
} PalModality;

typedef enum PalStatus {
  PAL_STATUS_OK = 0,
  PAL_STATUS_NULL_ARGUMENT = 1,
  PAL_STATUS_INVALID_ARGUMENT = 2,
  PAL_STATUS_IO = 3,
  PAL_STATUS_FORMAT = 4,
  PAL_STATUS_CORRUPTION = 5,
  PAL_STATUS_DATA = 6,
  PAL_STATUS_NUMERIC = 7,
  PAL_STATUS_BUFFER_TOO_SMALL = 8,
  PAL_STATUS_PANIC = 9,
} PalStatus;

/**
 * A token corpus loaded from disk.
 */
typedef struct PalCorpus PalCorpus;

/**
 * Trained anchors and settings loaded from a checkpoint.
 */
typedef struct PalModel PalModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or an empty string.
 * The pointer stays valid until the next call into this library on the same thread.
 */
const char *pal_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pal_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PalStatus pal_corpus_load(const char *path, struct PalCorpus **out);

/**
 * # Safety
 * `corpus` must come from [`pal_corpus_load`] and not be freed yet; null is ignored.
 */
void pal_corpus_free(struct PalCorpus *corpus);

/**
 * # Safety
 * `corpus` must be a live handle; `count` and `dim` must be writable.
 */
enum PalStatus pal_corpus_info(const struct PalCorpus *corpus,
                               enum PalModality *modality,
                               size_t *count,
                               size_t *dim);

/**
 * Number of tokens in sequence `index`.
 *
 * # Safety
 * `corpus` must be a live handle; `len` must be writable.
 */
enum PalStatus pal_corpus_sequence_len(const struct PalCorpus *corpus, size_t index, size_t *len);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PalStatus pal_model_load(const char *path, struct PalModel **out);

/**
 * # Safety
 * `model` must come from [`pal_model_load`] and not be freed yet; null is ignored.
 */
void pal_model_free(struct PalModel *model);

/**
 * Anchor count and per-side token dimensions.
 *
 * # Safety
 * `model` must be a live handle; outputs must be writable.
 */
enum PalStatus pal_model_info(const struct PalModel *model,
                              size_t *num_anchors,
                              size_t *vision_dim,
                              size_t *language_dim,
                              double *tau_p);

/**
 * Encodes a row-major `num_tokens x dim` token matrix into the unit
 * vector `h` (length K) written to `out`. `modality` takes a
 * `PalModality` value.
 *
 * # Safety
 * `tokens` must point at `num_tokens * dim` doubles and `out` at `out_len` doubles.
 */
enum PalStatus pal_model_encode(const struct PalModel *model,
                                uint32_t modality,
                                const double *tokens,
                                size_t num_tokens,
                                size_t dim,
                                double *out,
                                size_t out_len);

/**
 * Encodes sequence `index` of `corpus` with the side matching the corpus modality.
 *
 * # Safety
 * Handles must be live; `out` must point at `out_len` doubles.
 */
enum PalStatus pal_model_encode_corpus(const struct PalModel *model,
                                       const struct PalCorpus *corpus,
                                       size_t index,
                                       double *out,
                                       size_t out_len);

/**
 * Runs the randomized gradient check with default sizes.
 * `passed` receives 1 or 0 and `worst_error` the largest relative error seen.
 *
 * # Safety
 * Outputs must be writable.
 */
enum PalStatus pal_gradcheck(size_t instances, uint64_t seed, int32_t *passed, double *worst_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PAL_H */
