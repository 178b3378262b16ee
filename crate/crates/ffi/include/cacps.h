#ifndef CACPS_H
#define CACPS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum CacpsStatus {
  CACPS_STATUS_OK = 0,
  CACPS_STATUS_NULL_POINTER = 1,
  CACPS_STATUS_INVALID_ARGUMENT = 2,
  CACPS_STATUS_SHAPE_MISMATCH = 3,
  CACPS_STATUS_IO = 4,
  CACPS_STATUS_CHECKPOINT = 5,
  CACPS_STATUS_CONFIG = 6,
  CACPS_STATUS_NON_FINITE = 7,
  CACPS_STATUS_PANIC = 8,
} CacpsStatus;

typedef enum CacpsMixMode {
  CACPS_MIX_MODE_STRICT = 0,
  CACPS_MIX_MODE_RECTIFIED = 1,
} CacpsMixMode;

// Two segmentation networks whose averaged prediction is the output.
typedef struct CacpsPair CacpsPair;

// Network architecture, mirroring the library's `NetSpec`.
typedef struct CacpsNetSpec {
  uint32_t in_channels;
  uint32_t num_classes;
  uint32_t base_width;
  uint32_t depth;
  bool instance_norm;
} CacpsNetSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cacps_version(void);

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call into the library from this thread.
const char *cacps_last_error(void);

// Initializes a pair with distinct seeds.
//
// # Safety
// `spec` must point to a valid spec and `out` to writable storage for a
// handle. On success `*out` owns a pair to release with [`cacps_pair_free`].
enum CacpsStatus cacps_pair_new(const struct CacpsNetSpec *spec,
                                uint64_t seed1,
                                uint64_t seed2,
                                struct CacpsPair **out);

// Loads the pair stored in a training checkpoint.
//
// # Safety
// `path` must be a NUL-terminated UTF-8 string and `out` writable.
enum CacpsStatus cacps_pair_load_checkpoint(const char *path, struct CacpsPair **out);

// Releases a pair; null is ignored.
//
// # Safety
// `pair` must be null or a handle from this library not yet freed.
void cacps_pair_free(struct CacpsPair *pair);

// Number of output classes, or 0 for a null handle.
//
// # Safety
// `pair` must be null or a live handle.
uint32_t cacps_pair_num_classes(const struct CacpsPair *pair);

// Ensemble prediction on one single-channel image whose sides are
// multiples of `2^depth`.
//
// `probs` receives `num_classes × height × width` values (class-major) and
// may be null; `labels` receives `height × width` argmax classes and may be
// null.
//
// # Safety
// `image` must hold `height × width` values and non-null outputs must be
// large enough.
enum CacpsStatus cacps_pair_infer(const struct CacpsPair *pair,
                                  const double *image,
                                  uintptr_t height,
                                  uintptr_t width,
                                  double *probs,
                                  uint8_t *labels);

// Amplitude-spectrum mixing of `x` towards `partner`; writes `height × width`
// values to `out`.
//
// # Safety
// `x`, `partner` and `out` must each hold `height × width` values.
enum CacpsStatus cacps_augment(const double *x,
                               const double *partner,
                               uintptr_t height,
                               uintptr_t width,
                               double lambda,
                               double alpha,
                               enum CacpsMixMode mode,
                               double *out);

// Dice overlap of two binary masks (nonzero bytes are foreground).
//
// # Safety
// `pred` and `truth` must hold `height × width` bytes; `out` must be writable.
enum CacpsStatus cacps_dice(const uint8_t *pred,
                            const uint8_t *truth,
                            uintptr_t height,
                            uintptr_t width,
                            double *out);

// Hausdorff distance between the boundaries of two binary masks.
// `*defined` is false (and `*out` NaN) when exactly one mask is empty.
//
// # Safety
// `pred` and `truth` must hold `height × width` bytes; `out` and `defined`
// must be writable.
enum CacpsStatus cacps_hausdorff(const uint8_t *pred,
                                 const uint8_t *truth,
                                 uintptr_t height,
                                 uintptr_t width,
                                 double *out,
                                 bool *defined);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CACPS_H */
