#ifndef DEOBSTRUCT_H
#define DEOBSTRUCT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DobsStatus {
  DOBS_STATUS_OK = 0,
  DOBS_STATUS_NULL_POINTER = 1,
  DOBS_STATUS_INVALID_UTF8 = 2,
  DOBS_STATUS_SHAPE = 3,
  DOBS_STATUS_VALIDATION = 4,
  DOBS_STATUS_PARAMETER = 5,
  DOBS_STATUS_NUMERIC = 6,
  DOBS_STATUS_LOAD = 7,
  DOBS_STATUS_IO = 8,
  DOBS_STATUS_PANIC = 9,
} DobsStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct DobsModel DobsModel;

/**
 * Masking decision for an instruction.
 */
typedef struct DobsSwitch {
  /**
   * 1 when the instruction names a semi-transparent obstruction.
   */
  uint8_t semi_transparent;
  double sim_opaque;
  double sim_semi_transparent;
  double p_opaque;
  double p_semi_transparent;
} DobsSwitch;

/**
 * Summary of one removal call.
 */
typedef struct DobsTrace {
  struct DobsSwitch decision;
  uint8_t adapter_ran;
  double mask_mean;
  double mask_coverage;
} DobsTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load a checkpoint. On success `*out` owns a handle to release with
 * [`dobs_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DobsStatus dobs_model_load(const char *path, struct DobsModel **out);

/**
 * Release a handle from [`dobs_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle not freed before.
 */
void dobs_model_free(struct DobsModel *model);

/**
 * Run the full pipeline. `mask` may be null (use the detector) or point
 * to `width * height` values overriding it. `trace` may be null.
 *
 * # Safety
 * Buffers must hold the sizes documented at the crate level.
 */
enum DobsStatus dobs_remove(const struct DobsModel *model,
                            const double *image,
                            size_t width,
                            size_t height,
                            const char *instruction,
                            const double *mask,
                            double *out_image,
                            struct DobsTrace *trace);

/**
 * Detector probabilities, `width * height` values written to `out_mask`.
 *
 * # Safety
 * Buffers must hold the sizes documented at the crate level.
 */
enum DobsStatus dobs_detect_mask(const struct DobsModel *model,
                                 const double *image,
                                 size_t width,
                                 size_t height,
                                 double *out_mask);

/**
 * Transparency decision for an instruction.
 *
 * # Safety
 * `instruction` must be NUL-terminated; `out` must be writable.
 */
enum DobsStatus dobs_classify(const struct DobsModel *model,
                              const char *instruction,
                              struct DobsSwitch *out);

/**
 * PSNR in dB, capped at 100 for identical images.
 *
 * # Safety
 * Both images must hold `width * height * 3` doubles; `out` must be writable.
 */
enum DobsStatus dobs_psnr(const double *reference,
                          const double *test,
                          size_t width,
                          size_t height,
                          double *out);

/**
 * Luminance SSIM with an 11x11 Gaussian window.
 *
 * # Safety
 * Both images must hold `width * height * 3` doubles; `out` must be writable.
 */
enum DobsStatus dobs_ssim(const double *reference,
                          const double *test,
                          size_t width,
                          size_t height,
                          double *out);

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated)
 * and return its length in bytes, excluding the terminator. With a null or
 * too small buffer nothing is copied; the return value is still the length
 * needed, so callers can size a buffer and call again.
 *
 * # Safety
 * `buf` must be null or writable for `len` bytes.
 */
size_t dobs_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dobs_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEOBSTRUCT_H */
