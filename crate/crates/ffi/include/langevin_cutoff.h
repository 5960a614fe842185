#ifndef LANGEVIN_CUTOFF_H
#define LANGEVIN_CUTOFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LcStatus {
  LC_STATUS_OK = 0,
  LC_STATUS_NULL_POINTER = 1,
  LC_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The model (or a matrix that must be Hurwitz) is not stable.
   */
  LC_STATUS_UNSTABLE = 3,
  /**
   * Divergence, singular covariance or another numerical failure.
   */
  LC_STATUS_NUMERICAL = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  LC_STATUS_PANIC = 5,
} LcStatus;

typedef enum LcVerdict {
  LC_VERDICT_STABLE = 0,
  LC_VERDICT_UNSTABLE = 1,
  /**
   * The spectral abscissa is within roundoff of zero.
   */
  LC_VERDICT_INDETERMINATE = 2,
} LcVerdict;

/**
 * Opaque model handle.
 */
typedef struct LcModel LcModel;

/**
 * Mixing-time data at a starting point.
 */
typedef struct LcMixing {
  double eta;
  size_t nu;
  double tau;
  double t_mix;
} LcMixing;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Linear model `F(q) = M q` with friction `gamma`. `m` is `d x d`, row-major.
 * The noise level is 0; pass it to the calls that need one.
 *
 * # Safety
 * `m` must be valid for `d * d` reads and `out` for one write.
 */
enum LcStatus lc_model_new_linear(const double *m, size_t d, double gamma, struct LcModel **out);

/**
 * Named builtin force field (`"harmonic"`, `"quartic"`, `"rotation-mild"`, ...).
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` valid for one write.
 */
enum LcStatus lc_model_new_builtin(const char *name, double gamma, struct LcModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from `lc_model_new_*` not yet freed.
 */
void lc_model_free(struct LcModel *model);

/**
 * Position dimension `d` (the state has length `2d`).
 *
 * # Safety
 * `model` must be a live handle and `out` valid for one write.
 */
enum LcStatus lc_model_dim(const struct LcModel *model, size_t *out);

/**
 * Stability of the linear dynamics with drift matrix `[[0, I], [-M, -gamma I]]`.
 *
 * # Safety
 * `m` must be valid for `d * d` reads and `out` for one write.
 */
enum LcStatus lc_classify_linear(const double *m, size_t d, double gamma, enum LcVerdict *out);

/**
 * Stationary fluctuation covariance `Sigma` (`A Sigma + Sigma A^T = -J` at
 * `q = 0`), written row-major into `out`, which must hold `(2d)^2` values.
 *
 * # Safety
 * `model` must be a live handle and `out` valid for `len` writes.
 */
enum LcStatus lc_stationary_cov(const struct LcModel *model, double *out, size_t len);

/**
 * Spectral decay data and the mixing time from state `x` (length `2d`) at noise `eps`.
 *
 * # Safety
 * `model` must be a live handle, `x` valid for `len` reads and `out` for one write.
 */
enum LcStatus lc_mixing_time(const struct LcModel *model,
                             const double *x,
                             size_t len,
                             double eps,
                             struct LcMixing *out);

/**
 * `d_TV(N(X_t, 2 eps Sigma_t), N(0, 2 eps Sigma))` at each of the `n` times.
 *
 * # Safety
 * `model` must be a live handle, `x` valid for `len` reads, `times` for `n`
 * reads and `out` for `n` writes.
 */
enum LcStatus lc_gaussian_tv_curve(const struct LcModel *model,
                                   const double *x,
                                   size_t len,
                                   double eps,
                                   const double *times,
                                   size_t n,
                                   double *out);

/**
 * `d_TV(N(x, I), N(0, I))` for `|x| = r`, that is `2 Phi(r/2) - 1`.
 */
double lc_tv_unit(double r);

/**
 * Copies the last error message of the calling thread into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * including the terminating NUL, or 0 when there is no message.
 *
 * # Safety
 * `buf` must be null or valid for `len` writes.
 */
size_t lc_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lc_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LANGEVIN_CUTOFF_H */
