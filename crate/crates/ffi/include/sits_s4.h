#ifndef SITS_S4_H
#define SITS_S4_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Values 2 to 6 match the CLI exit codes.
typedef enum S4Status {
  S4_STATUS_OK = 0,
  // Null pointer, zero size or other bad argument.
  S4_STATUS_INVALID_ARGUMENT = 1,
  S4_STATUS_INVALID_CONFIG = 2,
  S4_STATUS_IO = 3,
  S4_STATUS_NON_FINITE_LOSS = 4,
  S4_STATUS_INCOMPATIBLE_CHECKPOINT = 5,
  S4_STATUS_MISSING_CLOUD_MASK = 6,
  // Shape, label-range or series-validity failure.
  S4_STATUS_INVALID_INPUT = 7,
  S4_STATUS_PANIC = 8,
} S4Status;

typedef enum S4Modality {
  S4_MODALITY_RADAR = 0,
  S4_MODALITY_OPTICAL = 1,
} S4Modality;

// Opaque loaded checkpoint.
typedef struct S4Checkpoint S4Checkpoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// NUL-terminated library version.
const char *s4_version(void);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `len > 0`). Returns the full message length
// plus one for the terminator.
//
// # Safety
// `buf` must be valid for `len` bytes or null with `len == 0`.
size_t s4_last_error(char *buf, size_t len);

// Nearest-timestamp pairing of two strictly increasing timestamp lists.
// Writes `min(n_radar, n_optical)` frame indices per modality and the
// anchor (the shorter list; radar on ties).
//
// # Safety
// Inputs must be valid for their lengths; both outputs for
// `min(n_radar, n_optical)` elements.
enum S4Status s4_align_timestamps(const int64_t *radar,
                                  size_t n_radar,
                                  const int64_t *optical,
                                  size_t n_optical,
                                  size_t *out_radar_index,
                                  size_t *out_optical_index,
                                  enum S4Modality *out_anchor);

// Fraction of clouded pixels of a `[T, H, W]` mask (nonzero = cloud).
//
// # Safety
// `mask` must be valid for `frames * height * width` bytes.
enum S4Status s4_cloud_cover_ratio(const uint8_t *mask,
                                   size_t frames,
                                   size_t height,
                                   size_t width,
                                   double *out_ratio);

// Symmetric pixel-level InfoNCE between two `[pixels, dim]` maps
// (row-major), every other position serving as a negative.
//
// # Safety
// Both maps must be valid for `pixels * dim` doubles.
enum S4Status s4_contrastive_loss(const double *first,
                                  const double *second,
                                  size_t pixels,
                                  size_t dim,
                                  double tau,
                                  double *out_loss);

// Loads a checkpoint file; on success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
enum S4Status s4_checkpoint_load(const char *path, struct S4Checkpoint **out);

// Releases a handle; null is ignored.
//
// # Safety
// `handle` must come from [`s4_checkpoint_load`] and not be used again.
void s4_checkpoint_free(struct S4Checkpoint *handle);

// Number of segmentation classes and the inference modality.
//
// # Safety
// `handle` must be a live handle; outputs must be writable.
enum S4Status s4_checkpoint_info(const struct S4Checkpoint *handle,
                                 size_t *out_classes,
                                 enum S4Modality *out_modality);

// Segments one raw `[T, C, H, W]` series (row-major float32) of the
// checkpoint's inference modality into `height * width` class indices.
// `modality` is an `S4Modality` value.
//
// # Safety
// `handle` must be a live handle used by one thread at a time; `data`
// valid for `T*C*H*W` floats, `timestamps` for `T` values and
// `out_labels` for `H*W` ints.
enum S4Status s4_predict(struct S4Checkpoint *handle,
                         uint32_t modality,
                         const float *data,
                         size_t frames,
                         size_t channels,
                         size_t height,
                         size_t width,
                         const int64_t *timestamps,
                         int32_t *out_labels);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SITS_S4_H */
