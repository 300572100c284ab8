#ifndef COMUNI_H
#define COMUNI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum ComuniStatus {
  COMUNI_STATUS_OK = 0,
  COMUNI_STATUS_NULL_ARGUMENT = 1,
  COMUNI_STATUS_INVALID_UTF8 = 2,
  COMUNI_STATUS_FORMAT = 3,
  COMUNI_STATUS_RANGE = 4,
  COMUNI_STATUS_SHAPE = 5,
  COMUNI_STATUS_CONFIG = 6,
  COMUNI_STATUS_DOMAIN = 7,
  COMUNI_STATUS_COMPATIBILITY = 8,
  COMUNI_STATUS_NO_OP = 9,
  COMUNI_STATUS_TRAINING_DIVERGENCE = 10,
  COMUNI_STATUS_SAMPLING_DIVERGENCE = 11,
  COMUNI_STATUS_IO = 12,
  COMUNI_STATUS_BUFFER_TOO_SMALL = 13,
  COMUNI_STATUS_PANIC = 14,
} ComuniStatus;

/**
 * Trained denoiser bound to the autoencoder it was trained on.
 */
typedef struct ComuniLdm ComuniLdm;

/**
 * Trained autoencoder.
 */
typedef struct ComuniVae ComuniVae;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread ("" after a success). Valid until the
 * next call on the same thread.
 */
const char *comuni_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *comuni_version(void);

/**
 * Loads an autoencoder checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ComuniStatus comuni_vae_load(const char *path, struct ComuniVae **out);

/**
 * # Safety
 * `vae` must come from [`comuni_vae_load`] and not be used afterwards. Null is ignored.
 */
void comuni_vae_free(struct ComuniVae *vae);

/**
 * Clip layout the autoencoder expects: `dims = [frames, height, width, 3]`.
 *
 * # Safety
 * `vae` must be a live handle and `dims` point to 4 writable values.
 */
enum ComuniStatus comuni_vae_clip_dims(const struct ComuniVae *vae, uintptr_t *dims);

/**
 * Encodes and decodes one clip.
 *
 * # Safety
 * `clip` must hold `len` values and `out` have room for `out_len`.
 */
enum ComuniStatus comuni_vae_reconstruct(const struct ComuniVae *vae,
                                         const float *clip,
                                         uintptr_t len,
                                         float *out,
                                         uintptr_t out_len);

/**
 * Decodes the common latent of `common_from` with the unique latents of `unique_from`.
 *
 * # Safety
 * Both inputs must hold `len` values and `out` have room for `out_len`.
 */
enum ComuniStatus comuni_vae_swap(const struct ComuniVae *vae,
                                  const float *common_from,
                                  const float *unique_from,
                                  uintptr_t len,
                                  float *out,
                                  uintptr_t out_len);

/**
 * Loads a denoiser checkpoint, checking it was trained on `vae`'s latents. `use_ema`
 * selects the moving-average weights.
 *
 * # Safety
 * `path` must be NUL-terminated, `vae` live and `out` valid.
 */
enum ComuniStatus comuni_ldm_load(const char *path,
                                  const struct ComuniVae *vae,
                                  bool use_ema,
                                  struct ComuniLdm **out);

/**
 * # Safety
 * `ldm` must come from [`comuni_ldm_load`] and not be used afterwards. Null is ignored.
 */
void comuni_ldm_free(struct ComuniLdm *ldm);

/**
 * Samples `frames` frames (extending past the clip length with `strategy` 1–6) and
 * decodes them into `out`, which needs `frames × height × width × 3` values.
 *
 * # Safety
 * Handles must be live and `out` have room for `out_len` values.
 */
enum ComuniStatus comuni_sample(const struct ComuniLdm *ldm,
                                const struct ComuniVae *vae,
                                uint8_t strategy,
                                uintptr_t frames,
                                uintptr_t stride,
                                uint64_t seed,
                                float *out,
                                uintptr_t out_len);

/**
 * PSNR in dB between two equally long buffers (99 for identical inputs).
 *
 * # Safety
 * `a` and `b` must hold `len` values; `out` must be valid.
 */
enum ComuniStatus comuni_psnr(const float *a, const float *b, uintptr_t len, double *out);

/**
 * SSIM between two `height × width × channels` frames.
 *
 * # Safety
 * `a` and `b` must hold `height × width × channels` values; `out` must be valid.
 */
enum ComuniStatus comuni_ssim(const float *a,
                              const float *b,
                              uintptr_t height,
                              uintptr_t width,
                              uintptr_t channels,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMUNI_H */
