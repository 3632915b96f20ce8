#ifndef EGCL_H
#define EGCL_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define EGCL_SCORE_VERBATIM 0

#define EGCL_SCORE_SIMILARITY 1

#define EGCL_ANCHOR_COUNT 9

typedef enum EgclStatus {
  EGCL_STATUS_OK = 0,
  EGCL_STATUS_NULL_POINTER = 1,
  EGCL_STATUS_INVALID_ARGUMENT = 2,
  EGCL_STATUS_SHAPE_MISMATCH = 3,
  EGCL_STATUS_MALFORMED_FILE = 4,
  EGCL_STATUS_IO = 5,
  EGCL_STATUS_EMPTY_INDEX = 6,
  EGCL_STATUS_NUMERICAL = 7,
  EGCL_STATUS_BUFFER_TOO_SMALL = 8,
  EGCL_STATUS_PANIC = 9,
  EGCL_STATUS_OTHER = 10,
} EgclStatus;

/**
 * Opaque handle to one level's exemplar graph.
 */
typedef struct EgclIndex EgclIndex;

/**
 * Opaque handle to a loaded checkpoint.
 */
typedef struct EgclModel EgclModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next call on the same thread.
 */
const char *egcl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *egcl_version(void);

/**
 * Loads an index file written by `egcl index`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out_index` a valid pointer.
 */
enum EgclStatus egcl_index_load(const char *path, struct EgclIndex **out_index);

/**
 * # Safety
 * `index` must come from [`egcl_index_load`] and not be used afterwards. Null is ignored.
 */
void egcl_index_free(struct EgclIndex *index);

/**
 * Node count, pyramid level (2..=5) and embedding dimension of an index.
 *
 * # Safety
 * `index` must be a live handle; the out pointers must be valid.
 */
enum EgclStatus egcl_index_info(const struct EgclIndex *index,
                                size_t *out_len,
                                uint32_t *out_level,
                                size_t *out_dim);

/**
 * Nearest exemplar to a unit query: its id, dot product and `1 - sigmoid(dot)`.
 *
 * # Safety
 * `query` must hold `dim` doubles; the out pointers must be valid.
 */
enum EgclStatus egcl_index_nearest(const struct EgclIndex *index,
                                   const double *query,
                                   size_t dim,
                                   uint32_t *out_id,
                                   double *out_dot,
                                   double *out_distance);

/**
 * Mean `1 - sigmoid(dot)` from the query to the top-layer exemplars.
 *
 * # Safety
 * `query` must hold `dim` doubles; `out_distance` must be valid.
 */
enum EgclStatus egcl_index_average_distance(const struct EgclIndex *index,
                                            const double *query,
                                            size_t dim,
                                            double *out_distance);

/**
 * Loads a checkpoint written by `egcl train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out_model` a valid pointer.
 */
enum EgclStatus egcl_model_load(const char *path, struct EgclModel **out_model);

/**
 * # Safety
 * `model` must come from [`egcl_model_load`] and not be used afterwards. Null is ignored.
 */
void egcl_model_free(struct EgclModel *model);

/**
 * Input channels expected at `level` (2..=5) and the embedding dimension
 * (0 for a model without a transformation).
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be valid.
 */
enum EgclStatus egcl_model_info(const struct EgclModel *model,
                                uint32_t level,
                                size_t *out_channels,
                                size_t *out_embed_dim);

/**
 * Classification probability and, when the model has a projection, the unit
 * embedding of one proposal's `[C, 7, 7]` features at `level`. Other levels
 * are fed zeros. `out_embedding` may be null when `embedding_capacity` is 0;
 * `out_embedding_len` receives the embedding length (0 without projection).
 *
 * # Safety
 * `features` must hold `features_len` doubles and `out_embedding` at least
 * `embedding_capacity`; the remaining out pointers must be valid.
 */
enum EgclStatus egcl_model_infer(const struct EgclModel *model,
                                 uint32_t level,
                                 const double *features,
                                 size_t features_len,
                                 double *out_probability,
                                 double *out_embedding,
                                 size_t embedding_capacity,
                                 size_t *out_embedding_len);

/**
 * InfoNCE of one anchor against one positive and `num_negatives` negatives,
 * all `dim`-dimensional; negatives are stored row after row.
 *
 * # Safety
 * Input pointers must hold the stated number of doubles; `out_loss` must be valid.
 */
enum EgclStatus egcl_infonce(const double *anchor,
                             const double *positive,
                             const double *negatives,
                             size_t num_negatives,
                             size_t dim,
                             double tau,
                             double *out_loss);

/**
 * Collaborative confidence `(1 - mu - lambda) p + mu c + lambda a`, where `c`
 * and `a` are the distances ([`EGCL_SCORE_VERBATIM`]) or one minus them
 * ([`EGCL_SCORE_SIMILARITY`]).
 *
 * # Safety
 * `out_confidence` must be valid.
 */
enum EgclStatus egcl_fuse_confidence(double p_cls,
                                     double d_c,
                                     double d_a,
                                     double mu,
                                     double lambda,
                                     uint32_t mode,
                                     double *out_confidence);

/**
 * Log-average miss rate over FPPI in [0.01, 1] from already matched
 * detections: `confidences[i]` with `true_positive[i]` (0 or 1), pooled over
 * `num_images` images holding `num_ground_truth` pedestrians. When
 * `out_anchor_miss_rates` is not null it receives the 9 sampled miss rates.
 *
 * # Safety
 * The detection arrays must hold `count` elements and `out_anchor_miss_rates`,
 * if given, [`EGCL_ANCHOR_COUNT`] doubles.
 */
enum EgclStatus egcl_mr2(const double *confidences,
                         const uint8_t *true_positive,
                         size_t count,
                         size_t num_ground_truth,
                         size_t num_images,
                         double *out_mr2,
                         double *out_anchor_miss_rates);

/**
 * The 9 FPPI anchors, written to `out_anchors`.
 *
 * # Safety
 * `out_anchors` must hold [`EGCL_ANCHOR_COUNT`] doubles.
 */
enum EgclStatus egcl_fppi_anchors(double *out_anchors);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EGCL_H */
