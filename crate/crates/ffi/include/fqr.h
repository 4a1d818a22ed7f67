#ifndef FQR_H
#define FQR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FqrStatus {
  FQR_STATUS_OK = 0,
  FQR_STATUS_NULL_POINTER = 1,
  FQR_STATUS_INVALID_INPUT = 2,
  FQR_STATUS_CONVERGENCE = 3,
  FQR_STATUS_BOOTSTRAP = 4,
  FQR_STATUS_IO = 5,
  FQR_STATUS_PANIC = 6,
} FqrStatus;

/*
 Functional dataset: response, scalar covariates and curves on a grid.
 */
typedef struct FqrDataset FqrDataset;

/*
 Fitted model.
 */
typedef struct FqrFit FqrFit;

/*
 Model settings. `lambda = 0` gives the roughness-only fit and
 `bandwidth = 0` the automatic bandwidth.
 */
typedef struct FqrFitOptions {
  double tau;
  size_t num_subintervals;
  size_t degree;
  size_t q;
  double lambda;
  double gamma;
  double bandwidth;
  /*
   Fraction of the largest subinterval RMS below which a subinterval is null.
   */
  double zero_threshold;
} FqrFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or null. Valid until the
 next failing call on the same thread.
 */
const char *fqr_last_error(void);

/*
 Defaults: cubic splines, 20 subintervals, second-derivative roughness.
 */
struct FqrFitOptions fqr_fit_options_default(double tau);

/*
 Build a dataset from row-major arrays: `z` is `n x d` (include the
 intercept column yourself), `x` is `m` consecutive `n x g` blocks.

 # Safety
 Every pointer must reference at least the stated number of doubles and
 `out` must be writable.
 */
enum FqrStatus fqr_dataset_new(const double *y,
                               size_t n,
                               const double *z,
                               size_t d,
                               const double *x,
                               size_t m,
                               const double *grid,
                               size_t g,
                               struct FqrDataset **out);

/*
 Load a wide CSV described by a JSON manifest.

 # Safety
 `csv_path` and `manifest_path` must be NUL-terminated strings and `out`
 writable.
 */
enum FqrStatus fqr_dataset_load_csv(const char *csv_path,
                                    const char *manifest_path,
                                    struct FqrDataset **out);

/*
 Number of samples, 0 for null.

 # Safety
 `ds` must be null or a live dataset handle.
 */
size_t fqr_dataset_len(const struct FqrDataset *ds);

/*
 # Safety
 `ds` must be null or a handle from this library not yet freed.
 */
void fqr_dataset_free(struct FqrDataset *ds);

/*
 Fit the model; the spline domain spans the dataset's grid.

 # Safety
 `ds` and `opts` must be live and `out` writable.
 */
enum FqrStatus fqr_fit(const struct FqrDataset *ds,
                       const struct FqrFitOptions *opts,
                       struct FqrFit **out);

/*
 # Safety
 `fit` must be null or a handle from this library not yet freed.
 */
void fqr_fit_free(struct FqrFit *fit);

/*
 Number of scalar coefficients, 0 for null.

 # Safety
 `fit` must be null or live.
 */
size_t fqr_fit_num_scalar(const struct FqrFit *fit);

/*
 Whether the solver met its tolerances.

 # Safety
 `fit` must be live and `out` writable.
 */
enum FqrStatus fqr_fit_converged(const struct FqrFit *fit, bool *out);

/*
 Copy α̂ into `out`, which holds `len >= fqr_fit_num_scalar(fit)` doubles.

 # Safety
 `fit` must be live and `out` must hold `len` doubles.
 */
enum FqrStatus fqr_fit_alpha(const struct FqrFit *fit, double *out, size_t len);

/*
 Evaluate β̂_l at `count` points.

 # Safety
 `fit` must be live, `t` and `out` must hold `count` doubles.
 */
enum FqrStatus fqr_fit_beta(const struct FqrFit *fit,
                            size_t l,
                            const double *t,
                            size_t count,
                            double *out);

/*
 Serialize the fit as JSON; release the string with [`fqr_string_free`].

 # Safety
 `fit` must be live and `out` writable.
 */
enum FqrStatus fqr_fit_to_json(const struct FqrFit *fit, char **out);

/*
 # Safety
 `s` must be null or a string returned by this library.
 */
void fqr_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FQR_H */
