#ifndef WDRO_OPF_H
#define WDRO_OPF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result codes. The non-zero values match the command-line exit statuses.
 */
typedef enum WdroStatus {
  WDRO_STATUS_OK = 0,
  WDRO_STATUS_INFEASIBLE = 2,
  WDRO_STATUS_SOLVER_FAILURE = 3,
  WDRO_STATUS_INPUT_ERROR = 4,
  WDRO_STATUS_NULL_POINTER = 5,
  WDRO_STATUS_BUFFER_TOO_SMALL = 6,
  WDRO_STATUS_PANIC = 7,
} WdroStatus;

/**
 * A parsed network case.
 */
typedef struct WdroNetwork WdroNetwork;

/**
 * A set of forecast-error samples (per-unit), one row per sample.
 */
typedef struct WdroSamples WdroSamples;

/**
 * A solved operating strategy together with the inputs that produced it.
 */
typedef struct WdroSolution WdroSolution;

/**
 * Scalar results of a solve.
 */
typedef struct WdroSolveSummary {
  double objective;
  double worst_case_cost;
  double generation_cost;
  double reserve_cost;
  double epsilon;
  double kkt_residual;
  uint32_t rounds;
  bool converged;
} WdroSolveSummary;

/**
 * Summary of a Monte Carlo evaluation.
 */
typedef struct WdroEvaluation {
  uint64_t trials;
  uint64_t failed;
  double lowest_reliability;
  double mean_cost;
  double cost_std_error;
} WdroEvaluation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated).
 * Returns the message length without the terminator; 0 when there is none.
 * The copy is truncated when `len` is too small.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t wdro_last_error(char *buf, size_t len);

/**
 * Loads a case file (MATPOWER `.m` or JSON, chosen by extension).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum WdroStatus wdro_network_load(const char *path, struct WdroNetwork **out);

/**
 * Parses a case from text; `json` selects the JSON format instead of MATPOWER.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum WdroStatus wdro_network_parse(const char *text, bool json, struct WdroNetwork **out);

/**
 * Number of buses, generators and wind farms.
 *
 * # Safety
 * `net` must come from this library; the outputs must be writable.
 */
enum WdroStatus wdro_network_dims(const struct WdroNetwork *net,
                                  size_t *n_buses,
                                  size_t *n_generators,
                                  size_t *n_wind);

/**
 * # Safety
 * `net` must be null or come from this library and not be freed twice.
 */
void wdro_network_free(struct WdroNetwork *net);

/**
 * Wraps `n_samples` rows of `n_farms` per-unit errors (row-major).
 *
 * # Safety
 * `data` must point to `n_farms * n_samples` doubles; `out` must be writable.
 */
enum WdroStatus wdro_samples_new(const double *data,
                                 size_t n_farms,
                                 size_t n_samples,
                                 struct WdroSamples **out);

/**
 * Draws samples for the network's farms from a JSON generation protocol,
 * for example `{"distribution":"laplace","scale_fraction":0.1,"seed":1}`.
 *
 * # Safety
 * `net` must come from this library; `protocol_json` must be NUL-terminated.
 */
enum WdroStatus wdro_samples_generate(const struct WdroNetwork *net,
                                      const char *protocol_json,
                                      size_t n_samples,
                                      struct WdroSamples **out);

/**
 * Number of samples held.
 *
 * # Safety
 * `samples` must be null or come from this library.
 */
size_t wdro_samples_len(const struct WdroSamples *samples);

/**
 * # Safety
 * `samples` must be null or come from this library and not be freed twice.
 */
void wdro_samples_free(struct WdroSamples *samples);

/**
 * Solves the chance-constrained dispatch. `method` is one of `wdro`, `ro`,
 * `mdro`, `gsp`, `dc`; `rho` is applied to every constraint family.
 * `cache_dir` may be null to disable the sizing cache.
 *
 * # Safety
 * Handles must come from this library; strings must be NUL-terminated.
 */
enum WdroStatus wdro_solve(const struct WdroNetwork *net,
                           const struct WdroSamples *samples,
                           const char *method,
                           double rho,
                           double beta,
                           double sigma_max,
                           const char *cache_dir,
                           struct WdroSolution **out);

/**
 * # Safety
 * `sol` must come from this library; `out` must be writable.
 */
enum WdroStatus wdro_solution_summary(const struct WdroSolution *sol, struct WdroSolveSummary *out);

/**
 * Copies per-generator setpoints, participation factors and reserves
 * (per-unit). Each non-null array must hold `len >= n_generators` doubles.
 *
 * # Safety
 * Every non-null array must have room for `len` doubles.
 */
enum WdroStatus wdro_solution_generators(const struct WdroSolution *sol,
                                         double *pg,
                                         double *alpha,
                                         double *r_up,
                                         double *r_down,
                                         size_t len);

/**
 * Strategy file JSON as written by the command line. Release with
 * [`wdro_string_free`].
 *
 * # Safety
 * `sol` must come from this library; `out` must be writable.
 */
enum WdroStatus wdro_solution_json(const struct WdroSolution *sol, char **out);

/**
 * # Safety
 * `sol` must be null or come from this library and not be freed twice.
 */
void wdro_solution_free(struct WdroSolution *sol);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void wdro_string_free(char *s);

/**
 * Monte Carlo evaluation; `model` is one of `full-ac`, `approx`, `lpf`, `dc`.
 *
 * # Safety
 * Handles must come from this library; `model` must be NUL-terminated.
 */
enum WdroStatus wdro_evaluate(const struct WdroNetwork *net,
                              const struct WdroSolution *sol,
                              const struct WdroSamples *samples,
                              const char *model,
                              struct WdroEvaluation *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WDRO_OPF_H */
