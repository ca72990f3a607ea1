/* C interface for the histossl contrastive-pretraining toolkit. */

#ifndef HISTOSSL_H
#define HISTOSSL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum HistosslStatus {
  /**
   * Success.
   */
  HISTOSSL_STATUS_OK = 0,
  /**
   * A pointer argument was null.
   */
  HISTOSSL_STATUS_NULL_POINTER = 1,
  /**
   * An argument value was rejected (shape, range, or encoding).
   */
  HISTOSSL_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The operation itself failed (I/O, numeric, or data error).
   */
  HISTOSSL_STATUS_RUNTIME_ERROR = 3,
} HistosslStatus;

/**
 * Opaque encoder + projection-head handle.
 */
typedef struct HistosslModel HistosslModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on the calling thread. The pointer is
 * valid until the next failing call on the same thread. Never null.
 */
const char *histossl_last_error_message(void);

/**
 * Create a randomly initialized model.
 *
 * `stage_channels` points at `n_stages` output-channel counts, one per
 * stride-2 encoder stage. `hidden_dim` 0 means "match the feature
 * dimension". On success `*out` owns the new handle.
 *
 * # Safety
 * `stage_channels` must be readable for `n_stages` elements and `out` must
 * be a valid pointer.
 */
enum HistosslStatus histossl_model_new(uintptr_t input_side,
                                       const uintptr_t *stage_channels,
                                       uintptr_t n_stages,
                                       uintptr_t blocks_per_stage,
                                       uintptr_t hidden_dim,
                                       uintptr_t out_dim,
                                       uint64_t seed,
                                       struct HistosslModel **out);

/**
 * Load a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a null-terminated string and `out` a valid pointer.
 */
enum HistosslStatus histossl_model_load(const char *path, struct HistosslModel **out);

/**
 * Save a model to a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle from this library; `path` a null-terminated
 * string.
 */
enum HistosslStatus histossl_model_save(const struct HistosslModel *model, const char *path);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be a handle from this library, not yet freed.
 */
void histossl_model_free(struct HistosslModel *model);

/**
 * Feature dimension of the frozen encoder (the width of `encode` rows).
 *
 * # Safety
 * `model` must be a live handle; returns 0 on null.
 */
uintptr_t histossl_model_feature_dim(const struct HistosslModel *model);

/**
 * Expected input side length in pixels (inputs are square RGB patches).
 *
 * # Safety
 * `model` must be a live handle; returns 0 on null.
 */
uintptr_t histossl_model_input_side(const struct HistosslModel *model);

/**
 * Encode a batch of images into frozen features.
 *
 * `pixels` holds `n * 3 * side * side` floats in NCHW channel order scaled
 * to [0, 1]; `features_out` receives `n * feature_dim` floats.
 *
 * # Safety
 * Both buffers must match the documented sizes for the given model and `n`.
 */
enum HistosslStatus histossl_model_encode(const struct HistosslModel *model,
                                          const float *pixels,
                                          uintptr_t n,
                                          float *features_out);

/**
 * Contrastive loss of a projection batch.
 *
 * `z` holds `rows * dim` floats where consecutive row pairs (0,1), (2,3),
 * ... are the two views of one source image; `rows` must be even.
 *
 * # Safety
 * `z` must be readable for `rows * dim` elements; `loss_out` valid.
 */
enum HistosslStatus histossl_nt_xent(const double *z,
                                     uintptr_t rows,
                                     uintptr_t dim,
                                     double temperature,
                                     double *loss_out);

/**
 * 1 if an HSV pixel (all channels in [0, 1]) counts as tissue foreground,
 * else 0.
 */
int32_t histossl_is_foreground(double h, double s, double v);

/**
 * Fraction of foreground pixels in an interleaved 8-bit RGB image.
 *
 * # Safety
 * `rgb` must be readable for `width * height * 3` bytes.
 */
enum HistosslStatus histossl_foreground_ratio(const uint8_t *rgb,
                                              uintptr_t width,
                                              uintptr_t height,
                                              double *ratio_out);

/**
 * Dataset-quota rule: `percent` of `available`, banker's-rounded, clamped
 * to `[min, max]`, never more than `available`.
 */
uintptr_t histossl_percentage_quota(uintptr_t available,
                                    double percent,
                                    uintptr_t min,
                                    uintptr_t max);

/**
 * Mini-batch k-means over row-major `n x d` features.
 *
 * `assignments_out` receives `n` cluster indices; `centroids_out` receives
 * `k * d` row-major centroid coordinates; `inertia_out` the within-cluster
 * sum of squared distances.
 *
 * # Safety
 * All buffers must match the documented sizes.
 */
enum HistosslStatus histossl_kmeans(const float *data,
                                    uintptr_t n,
                                    uintptr_t d,
                                    uintptr_t k,
                                    uintptr_t batch,
                                    uintptr_t iters,
                                    uint64_t seed,
                                    uint32_t *assignments_out,
                                    double *centroids_out,
                                    double *inertia_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HISTOSSL_H */
