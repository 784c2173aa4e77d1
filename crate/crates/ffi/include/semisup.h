#ifndef SEMISUP_H
#define SEMISUP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SemisupStatus {
  SEMISUP_STATUS_OK = 0,
  SEMISUP_STATUS_NULL_POINTER = 1,
  SEMISUP_STATUS_INVALID_UTF8 = 2,
  SEMISUP_STATUS_CONFIG = 3,
  SEMISUP_STATUS_IO = 4,
  SEMISUP_STATUS_FORMAT = 5,
  SEMISUP_STATUS_SHAPE = 6,
  SEMISUP_STATUS_DOMAIN = 7,
  SEMISUP_STATUS_CHECKPOINT = 8,
  SEMISUP_STATUS_NON_FINITE = 9,
  SEMISUP_STATUS_UNSUPPORTED = 10,
  /**
   * A Rust panic was caught at the boundary.
   */
  SEMISUP_STATUS_INTERNAL = 11,
} SemisupStatus;

/**
 * Opaque bounds verification report.
 */
typedef struct SemisupBoundsReport SemisupBoundsReport;

/**
 * Opaque training session.
 */
typedef struct SemisupTrainer SemisupTrainer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *semisup_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void semisup_string_free(char *s);

/**
 * Creates a session from TOML config text.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string; `out` must be writable.
 */
enum SemisupStatus semisup_trainer_new(const char *config_toml, struct SemisupTrainer **out);

/**
 * Creates a session resumed from a checkpoint file.
 *
 * # Safety
 * Both strings must be NUL-terminated; `out` must be writable.
 */
enum SemisupStatus semisup_trainer_resume(const char *config_toml,
                                          const char *checkpoint_path,
                                          struct SemisupTrainer **out);

/**
 * # Safety
 * `t` must be null or a handle from `semisup_trainer_new`/`_resume`.
 */
void semisup_trainer_free(struct SemisupTrainer *t);

/**
 * Advances by up to `steps` steps, stopping at the step budget. Writes the
 * number of steps taken to `taken` when it is non-null.
 *
 * # Safety
 * `t` must be a live handle; `taken` null or writable.
 */
enum SemisupStatus semisup_trainer_step(struct SemisupTrainer *t, uint64_t steps, uint64_t *taken);

/**
 * Current step and total step budget.
 *
 * # Safety
 * `t` must be a live handle; out-pointers null or writable.
 */
enum SemisupStatus semisup_trainer_progress(const struct SemisupTrainer *t,
                                            uint64_t *step,
                                            uint64_t *total_steps);

/**
 * All logged metrics rows as a JSON array.
 *
 * # Safety
 * `t` must be a live handle; `out` writable. Free the result with
 * `semisup_string_free`.
 */
enum SemisupStatus semisup_trainer_metrics_json(const struct SemisupTrainer *t, char **out);

/**
 * Top-1 error of the EMA and raw parameters on the configured test set.
 *
 * # Safety
 * `t` must be a live handle; out-pointers null or writable.
 */
enum SemisupStatus semisup_trainer_evaluate(const struct SemisupTrainer *t,
                                            double *top1_err_ema,
                                            double *top1_err_raw);

/**
 * Writes a checkpoint of the current state.
 *
 * # Safety
 * `t` must be a live handle; `path` NUL-terminated.
 */
enum SemisupStatus semisup_trainer_save(const struct SemisupTrainer *t, const char *path);

/**
 * Runs the bounds checks on TOML spec text, or the bundled default spec
 * when `spec_toml` is null.
 *
 * # Safety
 * `spec_toml` null or NUL-terminated; `out` writable.
 */
enum SemisupStatus semisup_bounds_run(const char *spec_toml, struct SemisupBoundsReport **out);

/**
 * # Safety
 * `r` must be null or a handle from `semisup_bounds_run`.
 */
void semisup_bounds_free(struct SemisupBoundsReport *r);

/**
 * Number of claims and how many passed.
 *
 * # Safety
 * `r` must be a live handle; out-pointers null or writable.
 */
enum SemisupStatus semisup_bounds_summary(const struct SemisupBoundsReport *r,
                                          uint32_t *claims,
                                          uint32_t *passed);

/**
 * The full report as JSON.
 *
 * # Safety
 * `r` must be a live handle; `out` writable. Free the result with
 * `semisup_string_free`.
 */
enum SemisupStatus semisup_bounds_report_json(const struct SemisupBoundsReport *r, char **out);

/**
 * Library version as a static string.
 */
const char *semisup_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEMISUP_H */
