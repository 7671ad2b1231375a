#ifndef SOHOT_H
#define SOHOT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

typedef enum SohotStatus {
  SOHOT_STATUS_OK = 0,
  SOHOT_STATUS_ARGUMENT = 1,
  SOHOT_STATUS_SHAPE = 2,
  SOHOT_STATUS_CAPACITY = 3,
  SOHOT_STATUS_STATE = 4,
  SOHOT_STATUS_DIVERGENCE = 5,
  SOHOT_STATUS_PARSE = 6,
  SOHOT_STATUS_EMPTY_DATASET = 7,
  SOHOT_STATUS_IO = 8,
  SOHOT_STATUS_NULL_POINTER = 9,
  SOHOT_STATUS_PANIC = 10,
} SohotStatus;

typedef enum SohotCostMode {
  SOHOT_COST_MODE_EXPLICIT = 0,
  SOHOT_COST_MODE_KERNELIZED = 1,
} SohotCostMode;

typedef enum SohotSplit {
  SOHOT_SPLIT_SOURCE_TRAIN = 0,
  SOHOT_SPLIT_SOURCE_TEST = 1,
  SOHOT_SPLIT_TARGET_TRAIN = 2,
  SOHOT_SPLIT_TARGET_TEST = 3,
} SohotSplit;

typedef enum SohotBenchVariant {
  SOHOT_BENCH_VARIANT_SOURCE_TARGET = 0,
  SOHOT_BENCH_VARIANT_SO = 1,
  SOHOT_BENCH_VARIANT_SO_WEIGHTED = 2,
} SohotBenchVariant;

/**
 * Four-split source/target dataset.
 */
typedef struct SohotDataset SohotDataset;

/**
 * Feature matrix, `dim` rows by `n` columns.
 */
typedef struct SohotFeatures SohotFeatures;

/**
 * Trained two-stream model.
 */
typedef struct SohotModel SohotModel;

/**
 * Explicit scatter tensor with its mean.
 */
typedef struct SohotScatter SohotScatter;

/**
 * Training settings. Obtain defaults from [`sohot_train_options_default`].
 */
typedef struct SohotTrainOptions {
  size_t order;
  bool weighted;
  double sigma1;
  double sigma2;
  double alpha1;
  double alpha2;
  size_t epochs;
  double learning_rate;
  double momentum;
  size_t batch_size;
  uint64_t seed;
  size_t hidden;
  size_t feat_dim;
  bool freeze_input_layer;
  bool baseline;
} SohotTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *sohot_last_error(void);

/**
 * Copies `dim * n` column-major values into a new feature handle.
 *
 * # Safety
 * `data` must point to `dim * n` readable doubles; `out` must be writable.
 */
enum SohotStatus sohot_features_new(const double *data,
                                    size_t dim,
                                    size_t n,
                                    struct SohotFeatures **out);

/**
 * # Safety
 * `f` must come from `sohot_features_new` and not be freed twice.
 */
void sohot_features_free(struct SohotFeatures *f);

/**
 * # Safety
 * `f` must be a live handle; `out` must be writable.
 */
enum SohotStatus sohot_scatter_new(const struct SohotFeatures *f,
                                   size_t order,
                                   struct SohotScatter **out);

/**
 * # Safety
 * `s` must come from `sohot_scatter_new` and not be freed twice.
 */
void sohot_scatter_free(struct SohotScatter *s);

/**
 * Number of stored (unique) coefficients.
 *
 * # Safety
 * `s` must be a live handle; `out` must be writable.
 */
enum SohotStatus sohot_scatter_len(const struct SohotScatter *s, size_t *out);

/**
 * Coefficient at a full multi-index of `order` entries, in any order.
 *
 * # Safety
 * `index` must point to `order` readable values; `out` must be writable.
 */
enum SohotStatus sohot_scatter_get(const struct SohotScatter *s,
                                   const size_t *index,
                                   size_t order,
                                   double *out);

/**
 * Squared Frobenius distance between two explicit tensors.
 *
 * # Safety
 * Both handles must be live; `out` must be writable.
 */
enum SohotStatus sohot_scatter_dist_sq(const struct SohotScatter *a,
                                       const struct SohotScatter *b,
                                       double *out);

/**
 * Squared distance between the order-`order` scatter tensors of two
 * feature sets, computed from Gram matrices.
 *
 * # Safety
 * Both handles must be live; `out` must be writable.
 */
enum SohotStatus sohot_kernel_dist_sq(const struct SohotFeatures *src,
                                      const struct SohotFeatures *tgt,
                                      size_t order,
                                      double *out);

/**
 * Gradient of [`sohot_kernel_dist_sq`] with respect to every feature,
 * written column-major into buffers shaped like the inputs.
 *
 * # Safety
 * `grad_src` and `grad_tgt` must hold `dim * N` and `dim * N*` doubles.
 */
enum SohotStatus sohot_kernel_grad(const struct SohotFeatures *src,
                                   const struct SohotFeatures *tgt,
                                   size_t order,
                                   double *grad_src,
                                   double *grad_tgt);

/**
 * `binom(d + r - 1, r)`.
 *
 * # Safety
 * `out` must be writable.
 */
enum SohotStatus sohot_unique_coeff_count(size_t d, size_t r, uint64_t *out);

/**
 * Leading-term operation count of one distance evaluation.
 *
 * # Safety
 * `out` must be writable.
 */
enum SohotStatus sohot_cost_model(size_t d,
                                  size_t n_src,
                                  size_t n_tgt,
                                  size_t order,
                                  enum SohotCostMode mode,
                                  uint64_t *out);

/**
 * The default synthetic shift benchmark for `seed`.
 *
 * # Safety
 * `out` must be writable.
 */
enum SohotStatus sohot_dataset_generate_benchmark(uint64_t seed, struct SohotDataset **out);

/**
 * Reads a `domain,split,label,f0,...` CSV file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SohotStatus sohot_dataset_load(const char *path, struct SohotDataset **out);

/**
 * # Safety
 * `ds` must be live; `path` must be a NUL-terminated string.
 */
enum SohotStatus sohot_dataset_save(const struct SohotDataset *ds, const char *path);

/**
 * # Safety
 * `ds` must be live; `out` must be writable.
 */
enum SohotStatus sohot_dataset_split_len(const struct SohotDataset *ds,
                                         enum SohotSplit split,
                                         size_t *out);

/**
 * # Safety
 * `ds` must come from this library and not be freed twice.
 */
void sohot_dataset_free(struct SohotDataset *ds);

struct SohotTrainOptions sohot_train_options_default(void);

/**
 * Trains on the training splits of `ds`.
 *
 * # Safety
 * `ds` and `opts` must be valid; `out` must be writable.
 */
enum SohotStatus sohot_train(const struct SohotDataset *ds,
                             const struct SohotTrainOptions *opts,
                             struct SohotModel **out);

/**
 * Trains one configuration of the synthetic benchmark.
 *
 * # Safety
 * `ds` must be valid; `out` must be writable.
 */
enum SohotStatus sohot_train_benchmark(const struct SohotDataset *ds,
                                       enum SohotBenchVariant variant,
                                       uint64_t seed,
                                       struct SohotModel **out);

/**
 * Target-stream accuracy on the target test split of `ds`.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum SohotStatus sohot_evaluate(const struct SohotModel *m,
                                const struct SohotDataset *ds,
                                double *out);

/**
 * # Safety
 * `m` must be live; `path` must be a NUL-terminated string.
 */
enum SohotStatus sohot_model_save(const struct SohotModel *m, const char *path);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SohotStatus sohot_model_load(const char *path, struct SohotModel **out);

/**
 * # Safety
 * `m` must come from this library and not be freed twice.
 */
void sohot_model_free(struct SohotModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOHOT_H */
