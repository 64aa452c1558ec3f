#ifndef KSFM_H
#define KSFM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define KSFM_OK 0

// A required pointer argument was null.
#define KSFM_ERR_NULL 1

// A string argument was not valid UTF-8.
#define KSFM_ERR_UTF8 2

// Bad instance, subset, parameter or configuration.
#define KSFM_ERR_INPUT 3

// The solver hit an internal invariant or step-size failure.
#define KSFM_ERR_SOLVER 4

// A Rust panic was caught at the boundary.
#define KSFM_ERR_PANIC 5

// Output buffer too small.
#define KSFM_ERR_BUFFER 6

#define KSFM_MODE_PARALLEL 0

#define KSFM_MODE_SEQUENTIAL_WEAK 1

#define KSFM_MODE_SEQUENTIAL_STRONG 2

#define KSFM_MODE_BRUTE_FORCE 3

#define KSFM_PROFILE_DESK 0

#define KSFM_PROFILE_FAITHFUL 1

// Opaque instance handle.
typedef struct KsfmInstance KsfmInstance;

// Opaque solve report handle.
typedef struct KsfmReport KsfmReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failing call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *ksfm_last_error(void);

// Static description of a status code.
const char *ksfm_status_str(int32_t code);

// Parses an instance from JSON.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a writable pointer.
int32_t ksfm_instance_from_json(const char *json, struct KsfmInstance **out);

// Generates an instance of family `kind` (planted, cut, coverage,
// modular_plus_concave, explicit).
//
// # Safety
// `kind` must be a NUL-terminated string and `out` a writable pointer.
int32_t ksfm_instance_generate(const char *kind,
                               size_t n,
                               size_t k,
                               uint64_t seed,
                               struct KsfmInstance **out);

// Ground-set size, or 0 for a null handle.
//
// # Safety
// `inst` must be null or a live handle.
size_t ksfm_instance_n(const struct KsfmInstance *inst);

// Evaluates f on the set listed in `members[0..len]`.
//
// # Safety
// `inst` must be a live handle, `members` must point to `len` readable
// elements (or be null when `len` is 0) and `value` must be writable.
int32_t ksfm_instance_evaluate(const struct KsfmInstance *inst,
                               const size_t *members,
                               size_t len,
                               double *value);

// Serializes the instance. Free the result with `ksfm_string_free`.
//
// # Safety
// `inst` must be null or a live handle.
char *ksfm_instance_to_json(const struct KsfmInstance *inst);

// # Safety
// `inst` must be null or a handle not yet freed.
void ksfm_instance_free(struct KsfmInstance *inst);

// Runs the solver. `mode` and `profile` take the `KSFM_MODE_*` and
// `KSFM_PROFILE_*` constants.
//
// # Safety
// `inst` must be a live handle and `out` a writable pointer.
int32_t ksfm_solve(const struct KsfmInstance *inst,
                   int32_t mode,
                   size_t k,
                   double eps,
                   uint64_t seed,
                   int32_t profile,
                   struct KsfmReport **out);

// # Safety
// `r` must be a live report handle.
double ksfm_report_value(const struct KsfmReport *r);

// # Safety
// `r` must be null or a live report handle.
uint64_t ksfm_report_queries(const struct KsfmReport *r);

// # Safety
// `r` must be null or a live report handle.
uint64_t ksfm_report_rounds(const struct KsfmReport *r);

// Copies the minimizer into `buf[0..cap]` and stores its size in `len`.
// Returns `KSFM_ERR_BUFFER` (with `len` set) when `cap` is too small, so a
// first call with `cap = 0` sizes the buffer.
//
// # Safety
// `r` must be a live handle, `len` writable, and `buf` must hold `cap`
// elements (it may be null when `cap` is 0).
int32_t ksfm_report_minimizer(const struct KsfmReport *r, size_t *buf, size_t cap, size_t *len);

// Full report as JSON. Free the result with `ksfm_string_free`.
//
// # Safety
// `r` must be null or a live report handle.
char *ksfm_report_to_json(const struct KsfmReport *r);

// # Safety
// `r` must be null or a handle not yet freed.
void ksfm_report_free(struct KsfmReport *r);

// # Safety
// `s` must be null or a string returned by this library and not yet freed.
void ksfm_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KSFM_H */
