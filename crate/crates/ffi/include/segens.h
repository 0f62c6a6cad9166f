/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef SEGENS_H
#define SEGENS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Values 1 to 4 match the command-line exit codes.
typedef enum SegensStatus {
  SEGENS_STATUS_OK = 0,
  SEGENS_STATUS_INVALID_ARGUMENT = 1,
  SEGENS_STATUS_IO = 2,
  SEGENS_STATUS_SHAPE_MISMATCH = 3,
  SEGENS_STATUS_NUMERIC = 4,
  SEGENS_STATUS_NULL_POINTER = 5,
  SEGENS_STATUS_PANIC = 6,
} SegensStatus;

typedef enum SegensCiMethod {
  SEGENS_CI_METHOD_WALD = 0,
  SEGENS_CI_METHOD_CLOPPER_PEARSON = 1,
} SegensCiMethod;

typedef enum SegensFusion {
  SEGENS_FUSION_AND = 0,
  SEGENS_FUSION_OR = 1,
  SEGENS_FUSION_MAX = 2,
} SegensFusion;

// Binary mask handle.
typedef struct SegensMask SegensMask;

// Stacking meta-learner handle.
typedef struct SegensMetaLearner SegensMetaLearner;

// Probability map handle.
typedef struct SegensProbMap SegensProbMap;

typedef struct SegensConfusion {
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
  uint64_t tn;
} SegensConfusion;

typedef struct SegensInterval {
  double estimate;
  double lower;
  double upper;
  double level;
  uint64_t n;
  enum SegensCiMethod method;
} SegensInterval;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread; empty after a success.
// The pointer stays valid until the next call into this library on the same thread.
const char *segens_last_error(void);

// Loads an 8-bit PGM or PNG; pixels above 127 are foreground.
//
// # Safety
// `path` must be a valid nul-terminated string and `out_mask` a valid pointer.
enum SegensStatus segens_mask_load(const char *path, struct SegensMask **out_mask);

// Builds a mask from `width * height` row-major bytes; nonzero is foreground.
//
// # Safety
// `data` must point to `width * height` readable bytes.
enum SegensStatus segens_mask_from_bytes(size_t width,
                                         size_t height,
                                         const uint8_t *data,
                                         struct SegensMask **out_mask);

// # Safety
// `mask` must be a live handle; `width` and `height` valid pointers.
enum SegensStatus segens_mask_dims(const struct SegensMask *mask, size_t *width, size_t *height);

// Copies the 0/1 pixels into `buffer`, which must hold `width * height` bytes;
// any other `len` is a shape mismatch.
//
// # Safety
// `buffer` must point to `len` writable bytes.
enum SegensStatus segens_mask_copy(const struct SegensMask *mask, uint8_t *buffer, size_t len);

// Writes the mask as 0/255 grayscale (PNG for a `.png` path, PGM otherwise).
//
// # Safety
// `mask` must be a live handle and `path` a valid nul-terminated string.
enum SegensStatus segens_mask_save(const struct SegensMask *mask, const char *path);

// # Safety
// `mask` must be null or a handle not yet freed.
void segens_mask_free(struct SegensMask *mask);

// Loads an 8-bit grayscale file as probabilities `v / 255`.
//
// # Safety
// `path` must be a valid nul-terminated string and `out_map` a valid pointer.
enum SegensStatus segens_probmap_load(const char *path, struct SegensProbMap **out_map);

// Builds a map from `width * height` row-major values in `[0, 1]`.
//
// # Safety
// `values` must point to `width * height` readable doubles.
enum SegensStatus segens_probmap_from_values(size_t width,
                                             size_t height,
                                             const double *values,
                                             struct SegensProbMap **out_map);

// # Safety
// `map` must be a live handle; `width` and `height` valid pointers.
enum SegensStatus segens_probmap_dims(const struct SegensProbMap *map,
                                      size_t *width,
                                      size_t *height);

// Copies the probabilities into `buffer`, which must hold `width * height`
// doubles; any other `len` is a shape mismatch.
//
// # Safety
// `buffer` must point to `len` writable doubles.
enum SegensStatus segens_probmap_copy(const struct SegensProbMap *map, double *buffer, size_t len);

// Writes the map as 8-bit grayscale, `round(p * 255)`.
//
// # Safety
// `map` must be a live handle and `path` a valid nul-terminated string.
enum SegensStatus segens_probmap_save(const struct SegensProbMap *map, const char *path);

// Foreground where `p >= threshold`.
//
// # Safety
// `map` must be a live handle and `out_mask` a valid pointer.
enum SegensStatus segens_probmap_binarize(const struct SegensProbMap *map,
                                          double threshold,
                                          struct SegensMask **out_mask);

// # Safety
// `map` must be null or a handle not yet freed.
void segens_probmap_free(struct SegensProbMap *map);

// `2 iou / (1 + iou)`.
//
// # Safety
// `out_dice` must be a valid pointer.
enum SegensStatus segens_dice_from_iou(double iou, double *out_dice);

// Pixel counts of `pred` against `gt`.
//
// # Safety
// Both handles must be live and `out_counts` a valid pointer.
enum SegensStatus segens_confusion(const struct SegensMask *pred,
                                   const struct SegensMask *gt,
                                   struct SegensConfusion *out_counts);

// Normal-approximation interval, clamped to `[0, 1]`.
//
// # Safety
// `out_interval` must be a valid pointer.
enum SegensStatus segens_wald_ci(double p_hat,
                                 uint64_t n,
                                 double level,
                                 struct SegensInterval *out_interval);

// Exact binomial interval for `k` successes out of `n`.
//
// # Safety
// `out_interval` must be a valid pointer.
enum SegensStatus segens_clopper_pearson_ci(uint64_t k,
                                            uint64_t n,
                                            double level,
                                            struct SegensInterval *out_interval);

// Approximate two-sided p-value of `estimate` against zero from its 95% interval.
//
// # Safety
// `out_p` must be a valid pointer.
enum SegensStatus segens_p_from_ci(double estimate, double lower, double upper, double *out_p);

// Fuses `count >= 2` maps; `method` is a [`SegensFusion`] value.
// `And`/`Or` binarize each input at `threshold`
// first; `Max` takes the pointwise maximum and binarizes it. `out_prob` may
// be null; with `Max` it receives the fused probabilities, otherwise it is
// left untouched.
//
// # Safety
// `maps` must point to `count` live handles; `out_mask` must be valid.
enum SegensStatus segens_fuse(uint32_t method,
                              const struct SegensProbMap *const *maps,
                              size_t count,
                              double threshold,
                              struct SegensMask **out_mask,
                              struct SegensProbMap **out_prob);

// Boundary-softened labels of `mask` (inner ring `zeta`, outer ring `omega`)
// with the flat 3x3 structuring element.
//
// # Safety
// `mask` must be a live handle and `out_map` a valid pointer.
enum SegensStatus segens_boundary_soft_labels(const struct SegensMask *mask,
                                              double zeta,
                                              double omega,
                                              size_t iterations,
                                              struct SegensProbMap **out_map);

// Focal Tversky loss of `pred` against the boundary-softened `gt`.
//
// # Safety
// Both handles must be live and `out_loss` a valid pointer.
enum SegensStatus segens_ft_bu_loss(const struct SegensMask *gt,
                                    const struct SegensProbMap *pred,
                                    double lambda,
                                    double gamma,
                                    double zeta,
                                    double omega,
                                    size_t iterations,
                                    double *out_loss);

// Loads a parameter directory written by `segens stack train`.
//
// # Safety
// `dir` must be a valid nul-terminated string and `out_net` a valid pointer.
enum SegensStatus segens_metalearner_load(const char *dir, struct SegensMetaLearner **out_net);

// A network whose prediction is 0.5 everywhere, mainly for testing bindings.
//
// # Safety
// `out_net` must be a valid pointer.
enum SegensStatus segens_metalearner_zeros(size_t in_channels, struct SegensMetaLearner **out_net);

// # Safety
// `net` must be a live handle and `out_channels` a valid pointer.
enum SegensStatus segens_metalearner_in_channels(const struct SegensMetaLearner *net,
                                                 size_t *out_channels);

// Predicts from a `channels x height x width` row-major float stack.
//
// # Safety
// `data` must point to `channels * height * width` readable floats.
enum SegensStatus segens_metalearner_predict(const struct SegensMetaLearner *net,
                                             size_t channels,
                                             size_t height,
                                             size_t width,
                                             const float *data,
                                             struct SegensProbMap **out_map);

// # Safety
// `net` must be null or a handle not yet freed.
void segens_metalearner_free(struct SegensMetaLearner *net);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEGENS_H */
