#ifndef ACMAP_H
#define ACMAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * What a merge call did.
 */
typedef enum AcmapMergeOutcome {
  /**
   * First task: the snapshot is the task adapter itself.
   */
  ACMAP_MERGE_OUTCOME_INITIALIZED = 0,
  /**
   * Running average updated.
   */
  ACMAP_MERGE_OUTCOME_MERGED = 1,
  /**
   * Past the early-stop threshold; only the task counter advanced.
   */
  ACMAP_MERGE_OUTCOME_FROZEN = 2,
} AcmapMergeOutcome;

/**
 * Result of every fallible call.
 */
typedef enum AcmapStatus {
  ACMAP_STATUS_OK = 0,
  ACMAP_STATUS_NULL_POINTER = 1,
  ACMAP_STATUS_INVALID_ARGUMENT = 2,
  ACMAP_STATUS_SHAPE = 3,
  ACMAP_STATUS_DEGENERATE = 4,
  ACMAP_STATUS_NUMERIC = 5,
  ACMAP_STATUS_CONFIG = 6,
  ACMAP_STATUS_DATA = 7,
  ACMAP_STATUS_FORMAT = 8,
  ACMAP_STATUS_ALIGNMENT = 9,
  ACMAP_STATUS_INCOMPLETE_STORE = 10,
  ACMAP_STATUS_INCOMPLETE_ARTIFACTS = 11,
  ACMAP_STATUS_DIVERGENCE = 12,
  ACMAP_STATUS_IO = 13,
  ACMAP_STATUS_PANIC = 14,
} AcmapStatus;

/**
 * Adapter weights for every block.
 */
typedef struct AcmapAdapter AcmapAdapter;

/**
 * Frozen feature extractor.
 */
typedef struct AcmapBackbone AcmapBackbone;

/**
 * Cosine classifier over prototype rows.
 */
typedef struct AcmapClassifier AcmapClassifier;

/**
 * Running merge with optional initial-weight replacement.
 */
typedef struct AcmapTrail AcmapTrail;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `cap`). Returns the full message length
 * including the terminator, or 0 when there is no error.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t acmap_last_error_message(char *buf, size_t cap);

/**
 * Seeded random frozen backbone. `nonlinearity`: 0 ReLU, 1 GELU.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum AcmapStatus acmap_backbone_new(size_t input_dim,
                                    size_t embed_dim,
                                    size_t n_blocks,
                                    size_t hidden_dim,
                                    uint32_t nonlinearity,
                                    uint64_t seed,
                                    struct AcmapBackbone **out);

/**
 * # Safety
 * `bb` must come from [`acmap_backbone_new`] and not be used afterwards.
 */
void acmap_backbone_free(struct AcmapBackbone *bb);

/**
 * Feature dimension d.
 *
 * # Safety
 * `bb` must be a live handle or null (returns 0).
 */
size_t acmap_backbone_embed_dim(const struct AcmapBackbone *bb);

/**
 * Features of one input. `adapter` may be null for the plain backbone.
 *
 * # Safety
 * `x` holds `x_len` values, `out` has room for `out_len` values.
 */
enum AcmapStatus acmap_backbone_forward(const struct AcmapBackbone *bb,
                                        const struct AcmapAdapter *adapter,
                                        const double *x,
                                        size_t x_len,
                                        double *out,
                                        size_t out_len);

/**
 * Fresh adapter shaped for `bb` (zero up-projection, so it starts as the
 * identity on features).
 *
 * # Safety
 * `bb` must be a live handle and `out` a valid handle slot.
 */
enum AcmapStatus acmap_adapter_new(const struct AcmapBackbone *bb,
                                   size_t bottleneck,
                                   double scale,
                                   uint64_t seed,
                                   struct AcmapAdapter **out);

/**
 * # Safety
 * `a` must be a live handle and `out` a valid handle slot.
 */
enum AcmapStatus acmap_adapter_clone(const struct AcmapAdapter *a, struct AcmapAdapter **out);

/**
 * # Safety
 * `a` must come from this library and not be used afterwards.
 */
void acmap_adapter_free(struct AcmapAdapter *a);

/**
 * Number of scalar parameters, or 0 for null.
 *
 * # Safety
 * `a` must be a live handle or null.
 */
size_t acmap_adapter_param_count(const struct AcmapAdapter *a);

/**
 * Copies all parameters (each block's down then up matrix, row-major).
 *
 * # Safety
 * `buf` must have room for `len` values.
 */
enum AcmapStatus acmap_adapter_get_params(const struct AcmapAdapter *a, double *buf, size_t len);

/**
 * Overwrites all parameters in the layout of [`acmap_adapter_get_params`].
 *
 * # Safety
 * `buf` must hold `len` values.
 */
enum AcmapStatus acmap_adapter_set_params(struct AcmapAdapter *a, const double *buf, size_t len);

/**
 * Merge trail starting from `init`. `early_stop` 0 means unbounded;
 * `initial_weight_replacement` nonzero makes θ_1 the init for later tasks.
 *
 * # Safety
 * `init` must be a live handle and `out` a valid handle slot.
 */
enum AcmapStatus acmap_trail_new(const struct AcmapAdapter *init,
                                 size_t early_stop,
                                 uint8_t initial_weight_replacement,
                                 struct AcmapTrail **out);

/**
 * # Safety
 * `trail` must come from [`acmap_trail_new`] and not be used afterwards.
 */
void acmap_trail_free(struct AcmapTrail *trail);

/**
 * Whether the next task trains and merges (1) or reuses the frozen
 * snapshot (0).
 *
 * # Safety
 * `trail` must be a live handle or null (returns 0).
 */
uint8_t acmap_trail_next_merges(const struct AcmapTrail *trail);

/**
 * Folds the next task adapter into the running average, or only advances
 * the counter once past the threshold.
 *
 * # Safety
 * `trail` and `theta` must be live handles; `outcome` may be null.
 */
enum AcmapStatus acmap_trail_merge(struct AcmapTrail *trail,
                                   const struct AcmapAdapter *theta,
                                   enum AcmapMergeOutcome *outcome);

/**
 * Tasks processed so far, frozen ones included.
 *
 * # Safety
 * `trail` must be a live handle or null (returns 0).
 */
size_t acmap_trail_task_count(const struct AcmapTrail *trail);

/**
 * Merged snapshots kept, `min(t, L)`.
 *
 * # Safety
 * `trail` must be a live handle or null (returns 0).
 */
size_t acmap_trail_snapshot_count(const struct AcmapTrail *trail);

/**
 * Copy of the current merged adapter.
 *
 * # Safety
 * `trail` must be a live handle and `out` a valid handle slot.
 */
enum AcmapStatus acmap_trail_current(const struct AcmapTrail *trail, struct AcmapAdapter **out);

/**
 * Copy of the initialization later task adapters start from.
 *
 * # Safety
 * `trail` must be a live handle and `out` a valid handle slot.
 */
enum AcmapStatus acmap_trail_init_weights(const struct AcmapTrail *trail,
                                          struct AcmapAdapter **out);

/**
 * Cosine classifier from `rows x cols` prototype rows (row-major) and one
 * class id per row.
 *
 * # Safety
 * `weights` holds `rows * cols` values and `class_ids` holds `rows`.
 */
enum AcmapStatus acmap_classifier_new(const double *weights,
                                      size_t rows,
                                      size_t cols,
                                      const uint64_t *class_ids,
                                      struct AcmapClassifier **out);

/**
 * # Safety
 * `clf` must come from [`acmap_classifier_new`] and not be used afterwards.
 */
void acmap_classifier_free(struct AcmapClassifier *clf);

/**
 * Predicted class id; cosine logits are written when `logits` is non-null
 * (`logits_len` must then equal the row count).
 *
 * # Safety
 * `feature` holds `len` values; `logits` is null or has `logits_len` slots.
 */
enum AcmapStatus acmap_classifier_predict(const struct AcmapClassifier *clf,
                                          const double *feature,
                                          size_t len,
                                          uint64_t *class_id,
                                          double *logits,
                                          size_t logits_len);

/**
 * Centroid mapping: shifts `n_old x dim` old prototypes by the mean
 * displacement between the current task's prototypes in the new
 * (`current_new`) and old (`current_old`) subspaces, both `n_cur x dim`.
 *
 * # Safety
 * Buffers hold the stated number of values; `out` has `n_old * dim` slots.
 */
enum AcmapStatus acmap_centroid_map(const double *old,
                                    size_t n_old,
                                    const double *current_new,
                                    const double *current_old,
                                    size_t n_cur,
                                    size_t dim,
                                    double *out);

/**
 * Library version as a static NUL-terminated string.
 */
const char *acmap_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACMAP_H */
