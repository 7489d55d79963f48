/* C interface to the conflict-eliminating BEV fusion kit. */

#ifndef ECFUSION_H
#define ECFUSION_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call. `ECF_STATUS_OK` is zero so the usual
 * `if (ecf_...(...))` error idiom works.
 */
typedef enum EcfStatus {
  ECF_STATUS_OK = 0,
  /**
   * Bad config key/value, incompatible shapes, or a violated precondition.
   */
  ECF_STATUS_USAGE = 1,
  /**
   * Divergence, NaN, or a failed runtime numeric check.
   */
  ECF_STATUS_NUMERIC = 2,
  /**
   * A required pointer argument was null.
   */
  ECF_STATUS_NULL_ARG = 3,
  /**
   * Filesystem failure.
   */
  ECF_STATUS_IO = 4,
} EcfStatus;

/**
 * Opaque run configuration (training, grid, conflict, eval settings).
 */
typedef struct EcfConfig EcfConfig;

/**
 * Opaque trained model handle.
 */
typedef struct EcfModel EcfModel;

/**
 * Plain-value evaluation summary. Empty buckets and unmatched center error
 * come back as NaN, never as a status code.
 */
typedef struct EcfMetrics {
  double map;
  double recall_both;
  double recall_lidar_only;
  double recall_camera_only;
  double center_err;
  uint64_t n_scenes;
} EcfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static version string of the underlying kit; never freed by the caller.
 */
const char *ecf_version(void);

/**
 * Copies the calling thread's last error into `buf` (always NUL-terminated
 * when `cap > 0`, truncating if needed) and returns the full length of the
 * message including the NUL. `ecf_last_error(NULL, 0)` sizes the buffer.
 *
 * # Safety
 * `buf` must be null or valid for writes of `cap` bytes.
 */
size_t ecf_last_error(char *buf, size_t cap);

/**
 * Fresh configuration with every key at its default.
 */
struct EcfConfig *ecf_config_new(void);

/**
 * Parses the same `key=value` text the CLI accepts. Returns null (with the
 * error retrievable) on unknown keys or bad values.
 *
 * # Safety
 * `text` must be null or a NUL-terminated string valid for reads.
 */
struct EcfConfig *ecf_config_parse(const char *text);

/**
 * Sets one `key=value` pair on an existing configuration.
 *
 * # Safety
 * `cfg` must be a live handle from this library; `key`/`value` must be
 * NUL-terminated strings valid for reads.
 */
enum EcfStatus ecf_config_set(struct EcfConfig *cfg, const char *key, const char *value);

/**
 * # Safety
 * `cfg` must be null or a live handle from this library; the handle is dead
 * afterwards.
 */
void ecf_config_free(struct EcfConfig *cfg);

/**
 * Two-stage training run under `cfg`; deterministic in the config's seed.
 * Returns null with a retrievable error on invalid configs or divergence.
 *
 * # Safety
 * `cfg` must be null or a live handle from this library.
 */
struct EcfModel *ecf_train(const struct EcfConfig *cfg);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum EcfStatus ecf_model_save(const struct EcfModel *model, const char *path);

/**
 * Loads a checkpoint written by `ecf_model_save` or the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string valid for reads.
 */
struct EcfModel *ecf_model_load(const char *path);

/**
 * # Safety
 * `model` must be null or a live handle from this library; the handle is
 * dead afterwards.
 */
void ecf_model_free(struct EcfModel *model);

/**
 * Scores `model` on the deterministic eval pool described by `cfg` and
 * fills `out`. The config's model section must match the checkpoint.
 *
 * # Safety
 * `model` and `cfg` must be live handles; `out` must be valid for writes.
 */
enum EcfStatus ecf_evaluate(const struct EcfModel *model,
                            const struct EcfConfig *cfg,
                            struct EcfMetrics *out);

/**
 * Runs the built-in gradient and oracle suites (quiet). `ECF_STATUS_OK`
 * means every suite passed.
 */
enum EcfStatus ecf_selftest(uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ECFUSION_H */
