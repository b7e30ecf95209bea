#ifndef RIPT_H
#define RIPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by all functions.
 */
typedef enum RiptStatus {
  RIPT_STATUS_OK = 0,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  RIPT_STATUS_NULL_OR_INVALID = 1,
  RIPT_STATUS_ARGUMENT = 2,
  RIPT_STATUS_CONFIG = 3,
  RIPT_STATUS_FORMAT = 4,
  RIPT_STATUS_IO = 5,
  RIPT_STATUS_DEGENERATE = 6,
  RIPT_STATUS_NUMERIC = 7,
  /**
   * An internal panic was caught at the boundary.
   */
  RIPT_STATUS_INTERNAL = 8,
} RiptStatus;

/**
 * Encoder loaded from a run config and (optionally) a checkpoint.
 */
typedef struct RiptEncoder RiptEncoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread (empty after a success).
 * The pointer stays valid until the next call on this thread.
 */
const char *ript_last_error(void);

/**
 * Loads the run config at `config_path` and the teacher encoder from
 * `checkpoint_path`. A null checkpoint gives the seeded initial encoder.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `checkpoint_path` null or
 * NUL-terminated; `out` a valid pointer to write the handle to.
 */
enum RiptStatus ript_encoder_open(const char *config_path,
                                  const char *checkpoint_path,
                                  struct RiptEncoder **out);

/**
 * Releases an encoder. Null is ignored.
 *
 * # Safety
 * `encoder` must come from [`ript_encoder_open`] and not be used afterwards.
 */
void ript_encoder_free(struct RiptEncoder *encoder);

/**
 * Width of the latent vectors written by [`ript_encoder_embed`]; 0 for null.
 *
 * # Safety
 * `encoder` must be null or a live handle.
 */
size_t ript_encoder_latent_dim(const struct RiptEncoder *encoder);

/**
 * Latent of one oriented point set. `points` and `normals` hold `n`
 * xyz triples; the set is centered and scaled before encoding. `out` must
 * have room for `out_len >= latent_dim` values.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum RiptStatus ript_encoder_embed(const struct RiptEncoder *encoder,
                                   const double *points,
                                   const double *normals,
                                   size_t n,
                                   double *out,
                                   size_t out_len);

/**
 * Retrieval macroMAP (percent) of `count` row-major feature vectors of
 * width `dim` with integer category labels.
 *
 * # Safety
 * `features` must hold `count * dim` values, `labels` `count` values, and
 * `out` must be writable.
 */
enum RiptStatus ript_macro_map(const double *features,
                               size_t count,
                               size_t dim,
                               const uint32_t *labels,
                               double *out);

/**
 * Normalized mutual information between two labelings of `n` items.
 *
 * # Safety
 * `pred` and `truth` must hold `n` values; `out` must be writable.
 */
enum RiptStatus ript_nmi(const uint32_t *pred, const uint32_t *truth, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RIPT_H */
