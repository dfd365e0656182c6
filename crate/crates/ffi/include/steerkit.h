#ifndef STEERKIT_H
#define STEERKIT_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Augmentation kinds, passed as `uint32_t`.
 */
#define STEERKIT_KIND_GEO 0

#define STEERKIT_KIND_PHOTO 1

#define STEERKIT_KIND_ROT 2

typedef enum {
  STEERKIT_STATUS_OK = 0,
  STEERKIT_STATUS_NULL_POINTER = 1,
  STEERKIT_STATUS_INVALID_ARGUMENT = 2,
  STEERKIT_STATUS_SHAPE_MISMATCH = 3,
  STEERKIT_STATUS_FORMAT = 4,
  STEERKIT_STATUS_IO = 5,
  STEERKIT_STATUS_NUMERICAL = 6,
  STEERKIT_STATUS_MISSING_MAP = 7,
  STEERKIT_STATUS_PANIC = 8,
} SteerkitStatus;

/**
 * Opaque loaded checkpoint.
 */
typedef struct SteerkitCheckpoint SteerkitCheckpoint;

/**
 * Message for the last failed call on this thread, or null. Owned by the library.
 */
const char *steerkit_last_error(void);

/**
 * Loads a checkpoint file. Free the handle with [`steerkit_checkpoint_free`].
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
SteerkitStatus steerkit_checkpoint_load(const char *path, SteerkitCheckpoint **out);

/**
 * # Safety
 * `ck` must come from [`steerkit_checkpoint_load`] and not be used afterwards. Null is a no-op.
 */
void steerkit_checkpoint_free(SteerkitCheckpoint *ck);

/**
 * Embedding dimension D and expected image side.
 *
 * # Safety
 * Pointers must be valid; `image_size` may be null.
 */
SteerkitStatus steerkit_checkpoint_dims(const SteerkitCheckpoint *ck,
                                        size_t *embed_dim,
                                        size_t *image_size);

/**
 * 1 if the checkpoint has a map for `kind`, else 0.
 *
 * # Safety
 * Pointers must be valid.
 */
SteerkitStatus steerkit_has_map(const SteerkitCheckpoint *ck, uint32_t kind, uint8_t *out);

/**
 * The checkpoint's default ΔM weight (5 equivariant, 1 invariant).
 *
 * # Safety
 * Pointers must be valid.
 */
SteerkitStatus steerkit_default_wm(const SteerkitCheckpoint *ck, double *out);

/**
 * Embeds `n` images of `size × size × 3` floats into `out` (`n × D`).
 *
 * # Safety
 * `pixels` must hold `n·size·size·3` floats and `out` room for `out_len` floats.
 */
SteerkitStatus steerkit_embed(const SteerkitCheckpoint *ck,
                              const float *pixels,
                              size_t n,
                              size_t size,
                              float *out,
                              size_t out_len);

/**
 * `M(e, θ)` for one embedding of length `d`.
 *
 * # Safety
 * `e` and `out` must hold `d` floats, `theta` `theta_len` doubles.
 */
SteerkitStatus steerkit_map_apply(const SteerkitCheckpoint *ck,
                                  uint32_t kind,
                                  const float *e,
                                  size_t d,
                                  const double *theta,
                                  size_t theta_len,
                                  float *out);

/**
 * `ΔM(e, θ) = M + w_m (M − e)` for one embedding of length `d`.
 *
 * # Safety
 * `e` and `out` must hold `d` floats, `theta` `theta_len` doubles.
 */
SteerkitStatus steerkit_delta_steer(const SteerkitCheckpoint *ck,
                                    uint32_t kind,
                                    const float *e,
                                    size_t d,
                                    const double *theta,
                                    size_t theta_len,
                                    double w_m,
                                    float *out);

/**
 * Applies `g(x; θ)` to one `size × size × 3` image.
 *
 * # Safety
 * `pixels` and `out` must hold `size·size·3` floats, `theta` `theta_len` doubles.
 */
SteerkitStatus steerkit_augment(const float *pixels,
                                size_t size,
                                uint32_t kind,
                                const double *theta,
                                size_t theta_len,
                                float *out);

/**
 * Library version, static.
 */
const char *steerkit_version(void);

#endif  /* STEERKIT_H */
