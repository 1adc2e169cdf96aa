#ifndef GPSPLINE_H
#define GPSPLINE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of an interface call. Nonzero values match the CLI exit codes
 * where a CLI counterpart exists.
 */
typedef enum GpsStatus {
  GPS_STATUS_OK = 0,
  /**
   * Bad input data, configuration, or file.
   */
  GPS_STATUS_VALIDATION = 2,
  /**
   * Chains did not reach the split-Rhat threshold.
   */
  GPS_STATUS_CONVERGENCE = 3,
  /**
   * Sampler, prediction, or linear-algebra failure.
   */
  GPS_STATUS_NUMERICAL = 4,
  /**
   * Null pointer, invalid UTF-8, or undersized buffer.
   */
  GPS_STATUS_INVALID_ARGUMENT = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  GPS_STATUS_PANIC = 6,
} GpsStatus;

/**
 * Opaque observed dataset.
 */
typedef struct GpsDataset GpsDataset;

/**
 * Opaque fitted model with the data and configuration behind it.
 */
typedef struct GpsFit GpsFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *gps_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gps_version(void);

/**
 * Loads a dataset CSV from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GpsStatus gps_dataset_load(const char *path, struct GpsDataset **out);

/**
 * Builds a dataset from `y` (`n_times × n_locations`, row-major, first row
 * zero), `x` (`n_locations × 5` with columns H, S, I, Sx, Sy) and `times`.
 * Locations are named `L1`, `L2`, ...
 *
 * # Safety
 * Buffers must hold the stated number of values and `out` must be valid.
 */
enum GpsStatus gps_dataset_new(const double *y,
                               const double *x,
                               const double *times,
                               size_t n_times,
                               size_t n_locations,
                               struct GpsDataset **out);

/**
 * Number of locations, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t gps_dataset_n_locations(const struct GpsDataset *ds);

/**
 * Number of time points, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t gps_dataset_n_times(const struct GpsDataset *ds);

/**
 * Releases a dataset. Null is ignored.
 *
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void gps_dataset_free(struct GpsDataset *ds);

/**
 * Fits the model to `ds`. `config_toml` is a run configuration in TOML, or
 * null for the defaults. When sampling completes but the chains do not
 * converge, `*out` is still set and [`GpsStatus::Convergence`] is returned.
 *
 * # Safety
 * `ds` must be a live dataset handle, `config_toml` null or NUL-terminated,
 * and `out` valid.
 */
enum GpsStatus gps_fit(const struct GpsDataset *ds, const char *config_toml, struct GpsFit **out);

/**
 * Loads a fit directory written by `gpspline fit` or [`gps_fit_save`].
 * Unconverged fits are refused unless `force` is nonzero.
 *
 * # Safety
 * `dir` must be NUL-terminated and `out` valid.
 */
enum GpsStatus gps_fit_load(const char *dir, bool force, struct GpsFit **out);

/**
 * Writes the fit directory `dir`; an existing one is replaced only when
 * `force` is nonzero.
 *
 * # Safety
 * `f` must be a live fit handle and `dir` NUL-terminated.
 */
enum GpsStatus gps_fit_save(const struct GpsFit *f, const char *dir, bool force);

/**
 * Largest split-Rhat over all parameters, or NaN for a null handle.
 *
 * # Safety
 * `f` must be null or a live fit handle.
 */
double gps_fit_max_rhat(const struct GpsFit *f);

/**
 * Number of time points of the fitted series, or 0 for a null handle.
 *
 * # Safety
 * `f` must be null or a live fit handle.
 */
size_t gps_fit_n_times(const struct GpsFit *f);

/**
 * Releases a fit. Null is ignored.
 *
 * # Safety
 * `f` must be null or a handle not yet freed.
 */
void gps_fit_free(struct GpsFit *f);

/**
 * Predictive mean and 95% interval of the series at raw input `x`
 * (H, S, I, Sx, Sy). Each output buffer receives `n_times` values; `len` is
 * their capacity. `rejection_rate` may be null.
 *
 * # Safety
 * `x` must hold 5 values, each output buffer `len` values, and `f` must be a
 * live fit handle.
 */
enum GpsStatus gps_predict(const struct GpsFit *f,
                           const double *x,
                           uint64_t seed,
                           double *mean,
                           double *lower95,
                           double *upper95,
                           size_t len,
                           double *rejection_rate);

/**
 * Evaluates the radial spline basis with `n_knots` knots at `times`: `w`
 * and `dw` receive `n_times × n_knots` row-major values of the basis and its
 * time derivative; `len` is the capacity of each.
 *
 * # Safety
 * `times` must hold `n_times` values and `w`, `dw` `len` values each.
 */
enum GpsStatus gps_basis_eval(const double *times,
                              size_t n_times,
                              size_t n_knots,
                              double *w,
                              double *dw,
                              size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GPSPLINE_H */
