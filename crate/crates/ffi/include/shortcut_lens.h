#ifndef SHORTCUT_LENS_H
#define SHORTCUT_LENS_H

/* Generated by cbindgen from the Rust sources; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SlStatus {
  SL_STATUS_OK = 0,
  SL_STATUS_INVALID_ARGUMENT = 1,
  SL_STATUS_NOT_FOUND = 2,
  SL_STATUS_STAGE_INCOMPLETE = 3,
  SL_STATUS_INTEGRITY = 4,
  SL_STATUS_PROVIDER = 5,
  SL_STATUS_IO = 6,
  SL_STATUS_INTERNAL = 7,
  SL_STATUS_PANIC = 8,
} SlStatus;

/**
 * A trained model loaded from a checkpoint directory.
 */
typedef struct SlModel SlModel;

/**
 * An open pipeline run.
 */
typedef struct SlRun SlRun;

typedef struct SlModelInfo {
  size_t image_size;
  size_t patch_size;
  size_t channels;
  size_t embed_dim;
  size_t heads;
  size_t blocks;
  size_t tokens;
  size_t classes;
} SlModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sl_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until
 * the next library call on the same thread.
 */
const char *sl_last_error(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void sl_string_free(char *s);

/**
 * Loads a checkpoint directory (`checkpoint.json` plus parameters).
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum SlStatus sl_model_load(const char *dir, struct SlModel **out);

/**
 * # Safety
 * `model` must come from [`sl_model_load`] or be NULL.
 */
void sl_model_free(struct SlModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum SlStatus sl_model_info(const struct SlModel *model, struct SlModelInfo *out);

/**
 * Classifies one image, optionally dropping tokens first.
 *
 * `pixels` holds `image_size² × channels` values in `[0, 1]`, row-major
 * with interleaved channels. `ablate` is NULL or one byte per patch token
 * (non-zero = remove). Class probabilities go to `probs` (`probs_len`
 * must equal the class count).
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum SlStatus sl_model_classify(const struct SlModel *model,
                                const float *pixels,
                                size_t pixels_len,
                                const uint8_t *ablate,
                                size_t ablate_len,
                                double *probs,
                                size_t probs_len);

/**
 * Creates a run under `run_dir`. `config_toml` may be NULL for defaults.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum SlStatus sl_run_create(const char *run_dir, const char *config_toml, struct SlRun **out);

/**
 * Opens an existing run.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum SlStatus sl_run_open(const char *run_dir, const char *run_id, struct SlRun **out);

/**
 * # Safety
 * `run` must come from this library or be NULL.
 */
void sl_run_free(struct SlRun *run);

/**
 * Writes the run id; free it with [`sl_string_free`].
 *
 * # Safety
 * `run` must be a live handle; `out` must be writable.
 */
enum SlStatus sl_run_id(struct SlRun *run, char **out);

/**
 * Runs every remaining stage. Non-zero `skip_concepts` skips captioning.
 *
 * # Safety
 * `run` must be a live handle.
 */
enum SlStatus sl_run_all(struct SlRun *run, int32_t skip_concepts);

/**
 * Selects a cluster as an expert decision, or the automatic pick when
 * `cluster` is negative.
 *
 * # Safety
 * `run` must be a live handle.
 */
enum SlStatus sl_run_select(struct SlRun *run, int64_t cluster);

/**
 * Mitigates the selected cluster (cached per cluster).
 *
 * # Safety
 * `run` must be a live handle.
 */
enum SlStatus sl_run_mitigate(struct SlRun *run);

/**
 * Writes the metrics JSON of a mitigated run; free it with
 * [`sl_string_free`].
 *
 * # Safety
 * `run` must be a live handle; `out` must be writable.
 */
enum SlStatus sl_run_metrics_json(struct SlRun *run, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHORTCUT_LENS_H */
