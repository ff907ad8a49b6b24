#ifndef CBF_MINNORM_H
#define CBF_MINNORM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every exported function.
 */
typedef enum CbfStatus {
  CBF_STATUS_OK = 0,
  CBF_STATUS_NULL_POINTER = 1,
  CBF_STATUS_INVALID_UTF8 = 2,
  CBF_STATUS_SCHEMA = 3,
  CBF_STATUS_PARSE = 4,
  CBF_STATUS_DIMENSION_MISMATCH = 5,
  CBF_STATUS_INVALID_ARGUMENT = 6,
  CBF_STATUS_EVAL = 7,
  CBF_STATUS_CBF_VIOLATION = 8,
  CBF_STATUS_NOT_AZ_POINT = 9,
  CBF_STATUS_CROSS_CHECK_FAILURE = 10,
  CBF_STATUS_ALL_UNDEFINED = 11,
  CBF_STATUS_INITIAL_STATE_UNSAFE = 12,
  CBF_STATUS_BUFFER_TOO_SMALL = 13,
  CBF_STATUS_INTERNAL = 99,
} CbfStatus;

typedef enum CbfRegion {
  CBF_REGION_D_PLUS = 0,
  CBF_REGION_D_MINUS = 1,
  CBF_REGION_EXTERIOR = 2,
} CbfRegion;

typedef enum CbfVerdictKind {
  CBF_VERDICT_KIND_UNBOUNDED = 0,
  CBF_VERDICT_KIND_BOUNDED = 1,
  CBF_VERDICT_KIND_INDETERMINATE = 2,
} CbfVerdictKind;

/*
 Opaque model handle.
 */
typedef struct CbfModel CbfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. Valid until the
 next failing call on the same thread.
 */
const char *cbf_last_error_message(void);

/*
 Static version string, `"<toolkit> (spec schema <n>)"`.
 */
const char *cbf_version(void);

/*
 Build a model from a JSON system spec.

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum CbfStatus cbf_model_from_json(const char *json, struct CbfModel **out);

/*
 Release a model. Null is ignored.

 # Safety
 `model` must come from [`cbf_model_from_json`] and not be used afterwards.
 */
void cbf_model_free(struct CbfModel *model);

/*
 State and input dimensions.

 # Safety
 `model` must be a live handle; `n` and `m` must be writable.
 */
enum CbfStatus cbf_model_dims(const struct CbfModel *model, uintptr_t *n, uintptr_t *m);

/*
 Evaluate `u*(x)`. `u_out` receives `m` entries (NaN where undefined
 outside the safe set); `h_out`, `n_out` and `region_out` may be null.

 # Safety
 `x` must point to `n` doubles and `u_out` to `m` writable doubles.
 */
enum CbfStatus cbf_evaluate(const struct CbfModel *model,
                            const double *x,
                            uintptr_t n,
                            double *u_out,
                            uintptr_t m,
                            double *h_out,
                            double *n_out,
                            enum CbfRegion *region_out);

/*
 Locate discontinuity points. Writes up to `capacity` points row-major
 into `points_out` (`capacity · n` doubles) and the total count into
 `count_out`; returns `BufferTooSmall` when the count exceeds `capacity`.

 # Safety
 `points_out` must hold `capacity · n` doubles (may be null if `capacity`
 is 0); `count_out` must be writable.
 */
enum CbfStatus cbf_locate_zset(const struct CbfModel *model,
                               uintptr_t seeds,
                               double tolerance,
                               double *points_out,
                               uintptr_t capacity,
                               uintptr_t *count_out);

/*
 Boundedness verdict at `x`. `certificate_out` (n doubles, may be null)
 receives the certificate direction when the verdict is `Unbounded` and
 is left untouched otherwise; `inevitable_out` (may be null) is set to 1
 when unboundedness is inevitable.

 # Safety
 `x` must point to `n` doubles; non-null outputs must be writable.
 */
enum CbfStatus cbf_test_point(const struct CbfModel *model,
                              const double *x,
                              uintptr_t n,
                              enum CbfVerdictKind *kind_out,
                              double *certificate_out,
                              int32_t *inevitable_out);

/*
 Full verdict report at `x` as JSON.

 # Safety
 `x` must point to `n` doubles; `json_out` must be writable.
 */
enum CbfStatus cbf_test_point_json(const struct CbfModel *model,
                                   const double *x,
                                   uintptr_t n,
                                   char **json_out);

/*
 Ray probe from `x` along unit `v` as JSON.

 # Safety
 `x` and `v` must each point to `n` doubles; `json_out` must be writable.
 */
enum CbfStatus cbf_ray_probe_json(const struct CbfModel *model,
                                  const double *x,
                                  const double *v,
                                  uintptr_t n,
                                  double t_max,
                                  uintptr_t samples,
                                  char **json_out);

/*
 Release a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not be used afterwards.
 */
void cbf_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CBF_MINNORM_H */
