#ifndef IBMD_H
#define IBMD_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum IbmdStatus {
  IBMD_STATUS_OK = 0,
  IBMD_STATUS_NULL_POINTER = 1,
  IBMD_STATUS_INVALID_UTF8 = 2,
  IBMD_STATUS_INVALID_ARGUMENT = 3,
  IBMD_STATUS_DOMAIN = 4,
  IBMD_STATUS_DIMENSION_MISMATCH = 5,
  IBMD_STATUS_NON_FINITE = 6,
  IBMD_STATUS_DIVERGENCE = 7,
  IBMD_STATUS_SINGULAR = 8,
  IBMD_STATUS_SCHEDULE = 9,
  IBMD_STATUS_COUPLING = 10,
  IBMD_STATUS_CONFIG = 11,
  IBMD_STATUS_CHECKPOINT = 12,
  IBMD_STATUS_IO = 13,
  IBMD_STATUS_CHECK_FAILED = 14,
  IBMD_STATUS_PANIC = 15,
} IbmdStatus;

/**
 * Opaque distilled generator together with the schedule it was trained on.
 */
typedef struct IbmdGenerator IbmdGenerator;

/**
 * Opaque data predictor loaded from a checkpoint (teacher or fake bridge).
 */
typedef struct IbmdNet IbmdNet;

/**
 * Opaque noise schedule.
 */
typedef struct IbmdSchedule IbmdSchedule;

/**
 * Bridge interpolation `x_t = a x_T + b x0 + c z` with `c2 = c^2`.
 */
typedef struct IbmdBridgeCoeffs {
  double a;
  double b;
  double c2;
} IbmdBridgeCoeffs;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ibmd_version(void);

/**
 * Message of the last failing call on this thread, or null if none.
 */
const char *ibmd_last_error(void);

/**
 * Static name of a status code, e.g. `"dimension_mismatch"`.
 */
const char *ibmd_status_name(enum IbmdStatus status);

/**
 * Brownian prior `dx = sqrt(eps) dW` on `[0, horizon]`.
 *
 * # Safety
 * `out` must be null or valid for a pointer write.
 */
enum IbmdStatus ibmd_schedule_brownian(double eps, double horizon, struct IbmdSchedule **out);

/**
 * Variance-preserving prior with linear `beta` on `[0, horizon]`.
 *
 * # Safety
 * `out` must be null or valid for a pointer write.
 */
enum IbmdStatus ibmd_schedule_vp(double beta_min,
                                 double beta_max,
                                 double horizon,
                                 struct IbmdSchedule **out);

/**
 * # Safety
 * `schedule` must be null or a handle from `ibmd_schedule_*` not yet freed.
 */
void ibmd_schedule_free(struct IbmdSchedule *schedule);

/**
 * # Safety
 * `schedule` must be a live handle; `out` must be valid for a write.
 */
enum IbmdStatus ibmd_schedule_horizon(const struct IbmdSchedule *schedule, double *out);

/**
 * Coefficients of the bridge marginal at time `t`.
 *
 * # Safety
 * `schedule` must be a live handle; `out` must be valid for a write.
 */
enum IbmdStatus ibmd_schedule_bridge_coeffs(const struct IbmdSchedule *schedule,
                                            double t,
                                            struct IbmdBridgeCoeffs *out);

/**
 * Draws `x_t` for each row pair `(x0, x_end)` at the per-row times `t`.
 *
 * # Safety
 * `x0`, `x_end` and `out` must hold `rows * dim` doubles, `t` must hold
 * `rows` doubles, and `out` must not alias the inputs.
 */
enum IbmdStatus ibmd_bridge_sample(const struct IbmdSchedule *schedule,
                                   const double *x0,
                                   const double *x_end,
                                   const double *t,
                                   size_t rows,
                                   size_t dim,
                                   uint64_t seed,
                                   double *out);

/**
 * Loads a predictor checkpoint; `path` may name the stem, `.bin` or `.json`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for a write.
 */
enum IbmdStatus ibmd_net_load(const char *path, struct IbmdNet **out);

/**
 * # Safety
 * `net` must be null or a handle from `ibmd_net_load` not yet freed.
 */
void ibmd_net_free(struct IbmdNet *net);

/**
 * # Safety
 * `net` must be a live handle; `out` must be valid for a write.
 */
enum IbmdStatus ibmd_net_dim(const struct IbmdNet *net, size_t *out);

/**
 * Whether the predictor consumes the `x_end` endpoint.
 *
 * # Safety
 * `net` must be a live handle; `out` must be valid for a write.
 */
enum IbmdStatus ibmd_net_is_conditional(const struct IbmdNet *net, bool *out);

/**
 * Predicts `x0` from `x_t` at per-row times `t`. `cond` may be null for
 * unconditional predictors.
 *
 * # Safety
 * `xt`, `out` and a non-null `cond` must hold `rows * dim` doubles; `t`
 * must hold `rows` doubles.
 */
enum IbmdStatus ibmd_net_predict(const struct IbmdNet *net,
                                 const double *xt,
                                 const double *t,
                                 const double *cond,
                                 size_t rows,
                                 double *out);

/**
 * Loads a generator checkpoint and the schedule recorded beside it.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for a write.
 */
enum IbmdStatus ibmd_generator_load(const char *path, struct IbmdGenerator **out);

/**
 * # Safety
 * `gen` must be null or a handle from `ibmd_generator_load` not yet freed.
 */
void ibmd_generator_free(struct IbmdGenerator *gen);

/**
 * # Safety
 * `gen` must be a live handle; `out` must be valid for a write.
 */
enum IbmdStatus ibmd_generator_dim(const struct IbmdGenerator *gen, size_t *out);

/**
 * Number of generator evaluations per sample.
 *
 * # Safety
 * `gen` must be a live handle; `out` must be valid for a write.
 */
enum IbmdStatus ibmd_generator_steps(const struct IbmdGenerator *gen, size_t *out);

/**
 * Re-grids the same network onto `steps` uniform inference times.
 *
 * # Safety
 * `gen` must be a live handle not shared with another thread.
 */
enum IbmdStatus ibmd_generator_set_steps(struct IbmdGenerator *gen, size_t steps);

/**
 * Draws one `x0` per row of `x_end`.
 *
 * # Safety
 * `x_end` and `out` must hold `rows * dim` doubles and must not alias.
 */
enum IbmdStatus ibmd_generator_sample(const struct IbmdGenerator *gen,
                                      const double *x_end,
                                      size_t rows,
                                      uint64_t seed,
                                      double *out);

/**
 * Energy distance between two sample sets of the same dimension.
 *
 * # Safety
 * `a` must hold `rows_a * dim` doubles, `b` must hold `rows_b * dim`.
 */
enum IbmdStatus ibmd_energy_distance(const double *a,
                                     size_t rows_a,
                                     const double *b,
                                     size_t rows_b,
                                     size_t dim,
                                     double *out);

/**
 * Runs a pipeline command (`train-teacher`, `distill`, `eval`,
 * `verify-identity`) from a TOML config, writing artifacts to `out_dir`.
 * `seed` may be null to keep the configured seed. Returns
 * `IBMD_STATUS_CHECK_FAILED` when the run completes but its check fails.
 *
 * # Safety
 * `command`, `config_path` and `out_dir` must be NUL-terminated strings;
 * a non-null `seed` must point to a readable `uint64_t`.
 */
enum IbmdStatus ibmd_run(const char *command,
                         const char *config_path,
                         const char *out_dir,
                         const uint64_t *seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IBMD_H */
