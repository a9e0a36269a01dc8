#ifndef SAR_H
#define SAR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SarStatus {
  SAR_STATUS_OK = 0,
  SAR_STATUS_NULL_POINTER = 1,
  SAR_STATUS_CONFIG = 2,
  SAR_STATUS_NUMERICAL = 3,
  SAR_STATUS_STOPPING = 4,
  SAR_STATUS_DOMAIN = 5,
  SAR_STATUS_DIMENSION = 6,
  SAR_STATUS_UNSUPPORTED = 7,
  SAR_STATUS_PARSE = 8,
  SAR_STATUS_IO = 9,
  SAR_STATUS_BUFFER_TOO_SMALL = 10,
  SAR_STATUS_PANIC = 11,
} SarStatus;

// Problem, data and configuration of one experiment.
typedef struct SarExperiment SarExperiment;

// Scalar results of `sar_solve`.
typedef struct SarSolveSummary {
  // Absolute noise level.
  double delta;
  // End time of the ensemble (the stopping time unless fixed in the config).
  double t_end;
  // Mean squared error, NaN without an exact solution.
  double mse;
  double variance_trace;
  // Relative data residual of the ensemble mean.
  double relative_residual;
  size_t n_paths;
} SarSolveSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len - 1` bytes) and returns the full message length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t sar_last_error(char *buf, size_t len);

// Creates an experiment from TOML text.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum SarStatus sar_experiment_from_toml(const char *toml, struct SarExperiment **out);

// Creates the Green's-function toy problem with `n` nodes, relative noise
// level `delta` and default settings otherwise.
//
// # Safety
// `out` must be writable.
enum SarStatus sar_experiment_toy(size_t n,
                                  double delta,
                                  uint64_t seed,
                                  struct SarExperiment **out);

// Creates the synthetic two-peak biosensor experiment.
//
// # Safety
// `out` must be writable.
enum SarStatus sar_experiment_biosensor(double delta, uint64_t seed, struct SarExperiment **out);

// # Safety
// `handle` must be null or come from a constructor and not be freed twice.
void sar_experiment_free(struct SarExperiment *handle);

// Sets the ensemble size.
//
// # Safety
// `handle` must be a live experiment.
enum SarStatus sar_experiment_set_paths(struct SarExperiment *handle, size_t n_paths);

// Writes the domain dimension, range dimension and numerical rank.
//
// # Safety
// `handle` must be a live experiment; output pointers must be writable.
enum SarStatus sar_experiment_dims(const struct SarExperiment *handle,
                                   size_t *domain,
                                   size_t *range,
                                   size_t *rank);

// Writes the `rank` singular values in descending order.
//
// # Safety
// `handle` must be a live experiment; `buf` must hold `len` doubles.
enum SarStatus sar_singular_values(const struct SarExperiment *handle, double *buf, size_t len);

// Stopping time of the configured rule on the experiment's noisy data.
//
// # Safety
// `handle` must be a live experiment; `t_star` must be writable.
enum SarStatus sar_stopping_time(const struct SarExperiment *handle, double *t_star);

// Closed-form mean `E x(t)` on the domain grid.
//
// # Safety
// `handle` must be a live experiment; `buf` must hold `len` doubles.
enum SarStatus sar_mean_at(const struct SarExperiment *handle, double t, double *buf, size_t len);

// Runs the stopped ensemble. Writes the scalar summary and, when the
// buffers are non-null, the pointwise ensemble mean and variance.
//
// # Safety
// `handle` must be a live experiment; `summary` must be writable; `mean`
// and `variance` must be null or hold `len` doubles.
enum SarStatus sar_solve(const struct SarExperiment *handle,
                         struct SarSolveSummary *summary,
                         double *mean,
                         double *variance,
                         size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAR_H */
