#ifndef PRUNELAB_H
#define PRUNELAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum PlStatus {
  PL_STATUS_OK = 0,
  PL_STATUS_NULL_POINTER = 1,
  PL_STATUS_INVALID_ARGUMENT = 2,
  PL_STATUS_SHAPE = 3,
  PL_STATUS_NON_FINITE = 4,
  PL_STATUS_FORMAT = 5,
  PL_STATUS_BAD_MAGIC = 6,
  PL_STATUS_VERSION_MISMATCH = 7,
  PL_STATUS_TRUNCATED = 8,
  PL_STATUS_MASK_MISMATCH = 9,
  PL_STATUS_WOULD_EMPTY_NETWORK = 10,
  PL_STATUS_DIVERGENCE = 11,
  PL_STATUS_CONFIG = 12,
  PL_STATUS_IO = 13,
  PL_STATUS_PANIC = 14,
} PlStatus;

// Weights, normalization statistics and mask of one network.
typedef struct PlModel PlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *pl_last_error(void);

// Library version as a static NUL-terminated string.
const char *pl_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed before.
void pl_string_free(char *s);

// Builds a freshly initialized network with a full mask. `arch` is
// `"mini_conv"` or `"mini_vgg"`; inputs are 3×`size`×`size`.
//
// # Safety
// `arch` must be a NUL-terminated string and `out` a writable pointer.
enum PlStatus pl_model_build(const char *arch,
                             size_t classes,
                             size_t size,
                             uint64_t seed,
                             struct PlModel **out);

// Loads a checkpoint written by `prunelab`. Without a stored mask the
// network gets a full one.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum PlStatus pl_model_load(const char *path, struct PlModel **out);

// Writes weights, mask and architecture sidecar (`<path>.json`).
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum PlStatus pl_model_save(const struct PlModel *model, const char *path);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not have been freed before.
void pl_model_free(struct PlModel *model);

// Number of prunable weights and how many of them are unmasked.
//
// # Safety
// `model` must be a live handle; out-pointers must be writable.
enum PlStatus pl_model_counts(const struct PlModel *model, size_t *prunable, size_t *remaining);

// One step of global magnitude pruning at `rate` over the unmasked
// weights; pruned weights are set to zero. `newly_pruned` may be null.
//
// # Safety
// `model` must be a live handle; `newly_pruned` null or writable.
enum PlStatus pl_model_prune(struct PlModel *model, double rate, size_t *newly_pruned);

// Eval-mode label logits for `n` images laid out as `[n, 3, size, size]`.
// `logits` must hold `n * classes` floats.
//
// # Safety
// `images` must point to `images_len` floats and `logits` to
// `logits_len` writable floats.
enum PlStatus pl_model_predict(const struct PlModel *model,
                               const float *images,
                               size_t images_len,
                               size_t n,
                               float *logits,
                               size_t logits_len);

// Natural-sparsity report as JSON. `epsilon <= 0` selects the smallest
// positive normal `f32`. Free the string with [`pl_string_free`].
//
// # Safety
// `model` must be a live handle and `out` writable.
enum PlStatus pl_model_sparsity_json(const struct PlModel *model, double epsilon, char **out);

// Runs (or resumes) the experiment described by a TOML config file and
// writes its records and summary. `threads == 0` uses `TS_THREADS` or the
// machine's parallelism. `computed` may be null.
//
// # Safety
// `config_path` must be a NUL-terminated string; `computed` null or
// writable.
enum PlStatus pl_run_experiment(const char *config_path, size_t threads, size_t *computed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRUNELAB_H */
