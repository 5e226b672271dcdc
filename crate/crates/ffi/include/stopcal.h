/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef STOPCAL_H
#define STOPCAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum StopcalStatus {
  StopcalStatus_Ok = 0,
  StopcalStatus_NullPointer = 1,
  StopcalStatus_InvalidArgument = 2,
  StopcalStatus_InvalidGrid = 3,
  StopcalStatus_InvalidMeasure = 4,
  StopcalStatus_NotUConvex = 5,
  StopcalStatus_NonConvexInput = 6,
  StopcalStatus_CollidingStates = 7,
  StopcalStatus_StepTooCoarse = 8,
  StopcalStatus_UnknownFamily = 9,
  StopcalStatus_Io = 10,
  StopcalStatus_Parse = 11,
  StopcalStatus_BufferTooSmall = 12,
  StopcalStatus_Panic = 13,
  StopcalStatus_Other = 14,
} StopcalStatus;

typedef enum StopcalXiKind {
  StopcalXiKind_Absorbing = 0,
  StopcalXiKind_Natural = 1,
} StopcalXiKind;

typedef struct StopcalChain StopcalChain;

typedef struct StopcalEigen StopcalEigen;

typedef struct StopcalForward StopcalForward;

typedef struct StopcalInverse StopcalInverse;

typedef struct StopcalMeasure StopcalMeasure;

typedef struct StopcalPayoff StopcalPayoff;

/**
 * Simulation settings; `stopcal_sim_default` fills the defaults.
 */
typedef struct StopcalSimConfig {
  uint64_t seed;
  size_t paths;
  double dt;
  double t_max;
  size_t shards;
  uint64_t max_jumps;
  bool bridge;
} StopcalSimConfig;

/**
 * Monte Carlo estimate.
 */
typedef struct StopcalEstimate {
  double mean;
  double std_error;
  size_t paths_used;
  double truncated_fraction;
  double lower_bound;
} StopcalEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; valid until the next failure.
 */
const char *stopcal_last_error(void);

/**
 * Library version as a static string.
 */
const char *stopcal_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library (or be null) and not be freed twice.
 */
void stopcal_string_free(char *s);

/**
 * Releases the handle; null is ignored.
 *
 * # Safety
 * The handle must come from this library and not be used afterwards.
 */
void stopcal_measure_free(struct StopcalMeasure *h);

/**
 * Releases the handle; null is ignored.
 *
 * # Safety
 * The handle must come from this library and not be used afterwards.
 */
void stopcal_eigen_free(struct StopcalEigen *h);

/**
 * Releases the handle; null is ignored.
 *
 * # Safety
 * The handle must come from this library and not be used afterwards.
 */
void stopcal_payoff_free(struct StopcalPayoff *h);

/**
 * Releases the handle; null is ignored.
 *
 * # Safety
 * The handle must come from this library and not be used afterwards.
 */
void stopcal_forward_free(struct StopcalForward *h);

/**
 * Releases the handle; null is ignored.
 *
 * # Safety
 * The handle must come from this library and not be used afterwards.
 */
void stopcal_inverse_free(struct StopcalInverse *h);

/**
 * Releases the handle; null is ignored.
 *
 * # Safety
 * The handle must come from this library and not be used afterwards.
 */
void stopcal_chain_free(struct StopcalChain *h);

/**
 * Speed measure with a sampled density, no atoms.
 *
 * # Safety
 * `grid` and `density` point to `n` doubles; `out` is writable.
 */
enum StopcalStatus stopcal_measure_from_density(const double *grid,
                                                const double *density,
                                                size_t n,
                                                double xi,
                                                enum StopcalXiKind xi_kind,
                                                struct StopcalMeasure **out);

/**
 * Speed measure from its JSON form.
 *
 * # Safety
 * `json` is a NUL-terminated string; `out` is writable.
 */
enum StopcalStatus stopcal_measure_from_json(const char *json, struct StopcalMeasure **out);

/**
 * Eigenfunction of the string with the given measure.
 *
 * # Safety
 * `m` is a live handle; `out` is writable.
 */
enum StopcalStatus stopcal_eigen_from_measure(const struct StopcalMeasure *m,
                                              double rho,
                                              struct StopcalEigen **out);

/**
 * Number of grid nodes of an eigenfunction (0 for null).
 *
 * # Safety
 * `e` is a live handle or null.
 */
size_t stopcal_eigen_len(const struct StopcalEigen *e);

/**
 * Copies the grid and `φ` values into caller buffers of capacity `cap`.
 *
 * # Safety
 * `x_out` and `phi_out` hold at least `cap` doubles.
 */
enum StopcalStatus stopcal_eigen_values(const struct StopcalEigen *e,
                                        double *x_out,
                                        double *phi_out,
                                        size_t cap);

/**
 * Builtin payoff family; `params_json` may be null for defaults.
 *
 * # Safety
 * Strings are NUL-terminated; `out` is writable.
 */
enum StopcalStatus stopcal_payoff_builtin(const char *name,
                                          const char *params_json,
                                          struct StopcalPayoff **out);

/**
 * `G(x, θ)` for a payoff handle (NaN for null).
 *
 * # Safety
 * `p` is a live handle or null.
 */
double stopcal_payoff_eval(const struct StopcalPayoff *p, double x, double theta);

/**
 * Forward solve on `n_theta` values of θ.
 *
 * # Safety
 * Handles are live; `theta` holds `n_theta` doubles; `out` is writable.
 */
enum StopcalStatus stopcal_forward_solve(const struct StopcalEigen *e,
                                         const struct StopcalPayoff *p,
                                         double rho,
                                         const double *theta,
                                         size_t n_theta,
                                         struct StopcalForward **out);

/**
 * Copies `V(θ)` and thresholds (`+inf` where not attained) for every θ.
 *
 * # Safety
 * `v_out` and `x_star_out` hold at least `cap` doubles.
 */
enum StopcalStatus stopcal_forward_values(const struct StopcalForward *s,
                                          double *v_out,
                                          double *x_star_out,
                                          size_t cap);

/**
 * Inverse problem from sampled `(θ, V)` with default options.
 *
 * # Safety
 * `theta`/`value` hold `n` doubles, `x_grid` holds `n_x`; `out` is writable.
 */
enum StopcalStatus stopcal_inverse_run(const double *theta,
                                       const double *value,
                                       size_t n,
                                       const struct StopcalPayoff *p,
                                       double rho,
                                       const double *x_grid,
                                       size_t n_x,
                                       struct StopcalInverse **out);

/**
 * 1 when the value curve is consistent, 0 when not, -1 for null.
 *
 * # Safety
 * `r` is a live handle or null.
 */
int32_t stopcal_inverse_consistent(const struct StopcalInverse *r);

/**
 * Report as JSON; release with `stopcal_string_free`. Null on failure.
 *
 * # Safety
 * `r` is a live handle or null.
 */
char *stopcal_inverse_json(const struct StopcalInverse *r);

/**
 * Birth-death chain from a piecewise-linear call value curve.
 *
 * # Safety
 * `theta`/`value` hold `n` doubles; `out` is writable.
 */
enum StopcalStatus stopcal_birthdeath_calibrate(const double *theta,
                                                const double *value,
                                                size_t n,
                                                double rho,
                                                struct StopcalChain **out);

/**
 * Number of states (0 for null). Rates, probabilities and masses have one entry fewer.
 *
 * # Safety
 * `c` is a live handle or null.
 */
size_t stopcal_chain_len(const struct StopcalChain *c);

/**
 * Copies states and `φ` (length `stopcal_chain_len`) and `p`, `λ`, masses
 * (one fewer). Any output pointer may be null to skip it.
 *
 * # Safety
 * Non-null outputs hold at least `cap` doubles.
 */
enum StopcalStatus stopcal_chain_values(const struct StopcalChain *c,
                                        double *states,
                                        double *phi,
                                        double *p,
                                        double *lambda,
                                        double *masses,
                                        size_t cap);

/**
 * Default simulation settings.
 */
struct StopcalSimConfig stopcal_sim_default(void);

/**
 * Monte Carlo `E_0[e^{-ρ H_x}]` for a density-only measure.
 *
 * # Safety
 * `m` is a live handle; `cfg` and `out` are valid pointers.
 */
enum StopcalStatus stopcal_mc_laplace(const struct StopcalMeasure *m,
                                      double rho,
                                      double x,
                                      const struct StopcalSimConfig *cfg,
                                      struct StopcalEstimate *out);

/**
 * Monte Carlo `E_0[e^{-ρ H_n}]` for a chain.
 *
 * # Safety
 * `c` is a live handle; `cfg` and `out` are valid pointers.
 */
enum StopcalStatus stopcal_mc_chain_laplace(const struct StopcalChain *c,
                                            double rho,
                                            size_t state,
                                            const struct StopcalSimConfig *cfg,
                                            struct StopcalEstimate *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STOPCAL_H */
