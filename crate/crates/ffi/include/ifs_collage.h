#ifndef IFS_COLLAGE_H
#define IFS_COLLAGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IfsStatus {
  IFS_STATUS_OK = 0,
  IFS_STATUS_NULL_POINTER = 1,
  IFS_STATUS_CONFIG = 2,
  IFS_STATUS_NUMERIC = 3,
  IFS_STATUS_IO = 4,
  IFS_STATUS_PANIC = 5,
} IfsStatus;

/**
 * Point cloud with uniform or explicit weights.
 */
typedef struct IfsCloud IfsCloud;

/**
 * Trained or loaded architecture.
 */
typedef struct IfsModel IfsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *ifs_last_error(void);

/**
 * Copies `n * dim` coordinates into a new uniform cloud.
 *
 * # Safety
 * `coords` must point to `n * dim` readable doubles; `out` must be writable.
 */
enum IfsStatus ifs_cloud_new(const double *coords,
                             size_t n,
                             size_t dim,
                             struct IfsCloud **out_cloud);

/**
 * # Safety
 * `cloud` must come from this library and not be freed twice.
 */
void ifs_cloud_free(struct IfsCloud *cloud);

/**
 * # Safety
 * `cloud` must be a live handle; the out pointers must be writable.
 */
enum IfsStatus ifs_cloud_shape(const struct IfsCloud *cloud, size_t *out_n, size_t *out_dim);

/**
 * Copies the coordinates into `buf`, which holds `capacity` doubles.
 *
 * # Safety
 * `buf` must point to `capacity` writable doubles.
 */
enum IfsStatus ifs_cloud_copy_coords(const struct IfsCloud *cloud, double *buf, size_t capacity);

/**
 * Noisy two-moons sample (noise 0.1, radius 2).
 *
 * # Safety
 * `out_cloud` must be writable.
 */
enum IfsStatus ifs_two_moons(size_t n, uint64_t seed, struct IfsCloud **out_cloud);

/**
 * Chaos-game sample of the Sierpinski gasket.
 *
 * # Safety
 * `out_cloud` must be writable.
 */
enum IfsStatus ifs_sierpinski_chaos(size_t n,
                                    size_t burn_in,
                                    uint64_t seed,
                                    struct IfsCloud **out_cloud);

/**
 * Debiased Sinkhorn divergence on the distance scale.
 *
 * # Safety
 * Both clouds must be live handles; `out_value` must be writable.
 */
enum IfsStatus ifs_sinkhorn_distance(const struct IfsCloud *a,
                                     const struct IfsCloud *b,
                                     double blur,
                                     size_t max_iters,
                                     double *out_value);

/**
 * Exact W2 between small clouds.
 *
 * # Safety
 * Both clouds must be live handles; `out_value` must be writable.
 */
enum IfsStatus ifs_exact_w2(const struct IfsCloud *a, const struct IfsCloud *b, double *out_value);

/**
 * `epsilon / (1 - c)`.
 *
 * # Safety
 * `out_bound` must be writable.
 */
enum IfsStatus ifs_collage_bound(double epsilon, double c, double *out_bound);

/**
 * Trains a model on `data`. `arch_toml` holds an architecture table
 * (`kind = "moe"` etc.) and `train_toml` a training table; either may be
 * null for the two-moons mixture defaults. When `checkpoint` is non-null the
 * result is saved there.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `data` must be live;
 * `out_model` and `out_final_loss` must be writable.
 */
enum IfsStatus ifs_train(const char *arch_toml,
                         const char *train_toml,
                         const struct IfsCloud *data,
                         const char *checkpoint,
                         struct IfsModel **out_model,
                         double *out_final_loss);

/**
 * # Safety
 * `path` must be NUL-terminated; `out_model` must be writable.
 */
enum IfsStatus ifs_model_load(const char *path, struct IfsModel **out_model);

/**
 * # Safety
 * `model` must come from this library and not be freed twice.
 */
void ifs_model_free(struct IfsModel *model);

/**
 * State dimension and parameter count.
 *
 * # Safety
 * `model` must be live; the out pointers must be writable.
 */
enum IfsStatus ifs_model_info(const struct IfsModel *model, size_t *out_dim, size_t *out_params);

/**
 * Certified contraction constant, or a negative value when none exists.
 *
 * # Safety
 * `model` must be live; `out_cap` must be writable.
 */
enum IfsStatus ifs_model_certified_cap(const struct IfsModel *model, double *out_cap);

/**
 * `n` attractor samples after `burn_in` Markov steps. Uncertified models
 * are refused unless `allow_uncertified` is non-zero.
 *
 * # Safety
 * `model` must be live; `out_cloud` must be writable.
 */
enum IfsStatus ifs_model_sample_attractor(const struct IfsModel *model,
                                          size_t n,
                                          size_t burn_in,
                                          uint64_t seed,
                                          int32_t allow_uncertified,
                                          struct IfsCloud **out_cloud);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IFS_COLLAGE_H */
