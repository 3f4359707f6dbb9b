#ifndef NAVSIM_H
#define NAVSIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by fallible entry points.
 */
typedef enum NavsimStatus {
  /**
   * Call succeeded.
   */
  NavsimOk = 0,
  /**
   * A required pointer argument was null.
   */
  NavsimNullArgument = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  NavsimInvalidUtf8 = 2,
  /**
   * Input text failed to parse or validate.
   */
  NavsimParseError = 3,
  /**
   * A filesystem operation failed.
   */
  NavsimIoError = 4,
  /**
   * The operation started but could not finish.
   */
  NavsimRuntimeError = 5,
} NavsimStatus;

/**
 * Opaque parsed configuration handle.
 */
typedef struct NavsimConfig NavsimConfig;

/**
 * Opaque parsed scenario handle.
 */
typedef struct NavsimScenario NavsimScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the most recent error message for this thread into `buf`.
 *
 * Returns the full message length in bytes (excluding the terminator); the
 * copy is truncated to `cap - 1` bytes and always NUL-terminated when
 * `cap > 0`. A null `buf` only queries the length.
 */
uintptr_t navsim_last_error(char *buf, uintptr_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *navsim_version(void);

/**
 * Scan-wide congestion of a 1080-ray lidar scan.
 *
 * `ranges` must point to exactly 1080 readings in meters; `d_s` is the
 * sensing threshold used as the logarithm base. Writes the scalar into
 * `out` on success.
 */
enum NavsimStatus navsim_congestion(const double *ranges, uintptr_t len, double d_s, double *out);

/**
 * Sub-goal update distance for a congestion value; pure and infallible.
 */
double navsim_update_threshold(double c);

/**
 * Min-pool a 1080-ray scan into 36 sector minima.
 *
 * Writes 36 pooled ranges (meters) into `out`.
 */
enum NavsimStatus navsim_minpool(const double *ranges, uintptr_t len, double *out);

/**
 * Parse and validate scenario text; returns null on failure.
 */
struct NavsimScenario *navsim_scenario_load(const char *text);

/**
 * Release a scenario handle; null is ignored.
 */
void navsim_scenario_free(struct NavsimScenario *s);

/**
 * Number of pedestrians in a loaded scenario; -1 for a null handle.
 */
int64_t navsim_scenario_ped_count(const struct NavsimScenario *s);

/**
 * Goal position of a loaded scenario, written into `x` and `y`.
 */
enum NavsimStatus navsim_scenario_goal(const struct NavsimScenario *s, double *x, double *y);

/**
 * Load a run configuration from a TOML file; returns null on failure.
 */
struct NavsimConfig *navsim_config_load(const char *path);

/**
 * Release a configuration handle; null is ignored.
 */
void navsim_config_free(struct NavsimConfig *c);

/**
 * Evaluate the configured scenario for `episodes` episodes.
 *
 * Writes per-episode CSVs and metrics JSON into the configured output
 * directory and returns the metrics JSON document as a heap string owned
 * by the caller (release with `navsim_string_free`). Null on failure.
 */
char *navsim_eval(const struct NavsimConfig *c, uintptr_t episodes);

/**
 * Release a string returned by this library; null is ignored.
 */
void navsim_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NAVSIM_H */
