/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef PEFTKIT_H
#define PEFTKIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PkStatus {
  PK_STATUS_OK = 0,
  PK_STATUS_INTERNAL = 1,
  PK_STATUS_CONFIG = 2,
  PK_STATUS_DATA = 3,
  PK_STATUS_NUMERIC = 4,
  PK_STATUS_SHAPE = 5,
  // Null pointer, invalid UTF-8 or a buffer that is too small.
  PK_STATUS_INVALID_ARGUMENT = 6,
  PK_STATUS_PANIC = 7,
} PkStatus;

// An experiment configuration.
typedef struct PkConfig PkConfig;

// A model in f32, ready for inference.
typedef struct PkModel PkModel;

typedef struct PkParamCount {
  uint64_t backbone;
  uint64_t head;
  uint64_t adapters;
  uint64_t trainable;
  uint64_t total;
  double fraction;
} PkParamCount;

typedef struct PkRunSummary {
  uint64_t trainable_params;
  double trainable_fraction;
  uint64_t epochs_run;
  double best_val_accuracy;
  double test_accuracy;
  double test_weighted_f1;
  double val_test_gap_pp;
} PkRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *pk_version(void);

// Copies the calling thread's last error message into `buf` (truncated and
// always NUL-terminated when `len > 0`). Returns the buffer size needed
// for the whole message including its NUL. The message is empty after a
// successful call.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t pk_last_error(char *buf, size_t len);

// Looks up a named preset (`"q4_toy"`, `"frozen"`, ...).
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum PkStatus pk_config_preset(const char *name, struct PkConfig **out);

// Parses and validates an experiment config from TOML text.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum PkStatus pk_config_from_toml(const char *toml, struct PkConfig **out);

// Overrides the training seed.
//
// # Safety
// `cfg` must be a live handle.
enum PkStatus pk_config_set_seed(struct PkConfig *cfg, uint64_t seed);

// Overrides the number of training epochs.
//
// # Safety
// `cfg` must be a live handle.
enum PkStatus pk_config_set_epochs(struct PkConfig *cfg, uint64_t epochs);

// # Safety
// `cfg` must be null or a handle not yet freed.
void pk_config_free(struct PkConfig *cfg);

// Closed-form parameter accounting; never builds weights.
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum PkStatus pk_count_params(const struct PkConfig *cfg, struct PkParamCount *out);

// Runs the full experiment into `out_dir` (null: the config's default
// directory) and fills `out` with the headline numbers.
//
// # Safety
// `cfg` must be a live handle; `out_dir` null or NUL-terminated; `out`
// writable.
enum PkStatus pk_run(const struct PkConfig *cfg, const char *out_dir, struct PkRunSummary *out);

// Builds the untrained model of `cfg` (quantized and adapted as
// configured) from `seed`.
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum PkStatus pk_model_build(const struct PkConfig *cfg, uint64_t seed, struct PkModel **out);

// Loads a `model.ckpt` written by a run.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum PkStatus pk_model_load(const char *path, struct PkModel **out);

// # Safety
// `model` must be a live handle; `path` NUL-terminated.
enum PkStatus pk_model_save(const struct PkModel *model, const char *path);

// Input geometry: images are `channels × size × size`, channels first.
//
// # Safety
// `model` must be a live handle; the out pointers must be writable.
enum PkStatus pk_model_shape(const struct PkModel *model,
                             size_t *channels,
                             size_t *image_size,
                             size_t *num_classes);

// Eval-mode logits for `n` normalized images laid out `[n, C, H, W]`.
// `logits` receives `n × num_classes` values, row-major.
//
// # Safety
// `pixels` must hold `pixels_len` floats and `logits` `logits_len`.
enum PkStatus pk_model_predict(const struct PkModel *model,
                               const float *pixels,
                               size_t pixels_len,
                               size_t n,
                               float *logits,
                               size_t logits_len);

// # Safety
// `model` must be null or a handle not yet freed.
void pk_model_free(struct PkModel *model);

// NF4 round trip of a flat weight vector with double-quantized absmax
// (`block_size` values per absmax, `dq_block_size` absmaxes per group).
// `out` receives the dequantized values.
//
// # Safety
// `values` and `out` must each hold `len` doubles.
enum PkStatus pk_nf4_roundtrip(const double *values,
                               size_t len,
                               size_t block_size,
                               size_t dq_block_size,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PEFTKIT_H */
