#ifndef ESKETCH_H
#define ESKETCH_H

/* Generated from the esketch-ffi crate; edit the Rust source instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum EskStatus {
  /**
   * Success.
   */
  ESK_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  ESK_STATUS_NULL_POINTER = 1,
  /**
   * A parameter failed validation; nothing was modified.
   */
  ESK_STATUS_INVALID = 2,
  /**
   * An item id was 0 or above the configured universe size.
   */
  ESK_STATUS_ITEM_OUT_OF_RANGE = 3,
  /**
   * The root finder could not certify its tolerance.
   */
  ESK_STATUS_NO_CONVERGENCE = 4,
  /**
   * The memory budget admits no sketch configuration.
   */
  ESK_STATUS_INFEASIBLE_BUDGET = 5,
  /**
   * Unexpected internal failure.
   */
  ESK_STATUS_INTERNAL = 6,
} EskStatus;

/**
 * Streaming counter over a fixed item universe; create with
 * `esk_sketch_new`, release with `esk_sketch_free`.
 */
typedef struct EskSketch EskSketch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of the library as a static NUL-terminated string.
 */
const char *esk_version(void);

/**
 * Creates a sketch with `m1` heavy buckets, a `d` x `m2` count-min block,
 * eviction threshold `lambda`, and item universe 1..=`n_items`. On success
 * writes the handle to `out` and returns ESK_STATUS_OK.
 *
 * # Safety
 *
 * `out` must be a valid pointer to writable storage for one pointer.
 */
enum EskStatus esk_sketch_new(uint32_t m1,
                              uint32_t m2,
                              uint32_t d,
                              uint64_t lambda,
                              uint32_t n_items,
                              uint64_t beta_seed,
                              uint64_t cm_seed,
                              struct EskSketch **out);

/**
 * Releases a sketch created by `esk_sketch_new`; a null handle is a no-op.
 *
 * # Safety
 *
 * `sketch` must be null or a handle from `esk_sketch_new` not yet freed.
 */
void esk_sketch_free(struct EskSketch *sketch);

/**
 * Feeds one arrival of `item` (1-based) through the sketch.
 *
 * # Safety
 *
 * `sketch` must be a live handle from `esk_sketch_new`, not used
 * concurrently from another thread.
 */
enum EskStatus esk_sketch_update(struct EskSketch *sketch, uint32_t item);

/**
 * Feeds `len` arrivals in order. The whole batch is validated first; on
 * ESK_STATUS_ITEM_OUT_OF_RANGE the sketch is unchanged.
 *
 * # Safety
 *
 * `sketch` as in `esk_sketch_update`; `items` must point to `len`
 * readable u32 values (null is accepted when `len` is 0).
 */
enum EskStatus esk_sketch_update_many(struct EskSketch *sketch,
                                      const uint32_t *items,
                                      uintptr_t len);

/**
 * Writes the (never undercounting) estimate for `item` to `out`.
 *
 * # Safety
 *
 * `sketch` must be a live handle; `out` must be writable.
 */
enum EskStatus esk_sketch_estimate(const struct EskSketch *sketch, uint32_t item, uint64_t *out);

/**
 * Number of arrivals seen so far; 0 for a null handle.
 *
 * # Safety
 *
 * `sketch` must be null or a live handle.
 */
uint64_t esk_sketch_t(const struct EskSketch *sketch);

/**
 * Fraction of arrivals retained in the heavy block; 0 for a null handle.
 *
 * # Safety
 *
 * `sketch` must be null or a live handle.
 */
double esk_sketch_heavy_fraction(const struct EskSketch *sketch);

/**
 * Writes the limiting absorbed probability mass g for a Zipf(`alpha`)
 * stream over `n_items` items hashed into `m1` buckets by `beta_seed`,
 * evaluated at threshold `lambda`.
 *
 * # Safety
 *
 * `out` must be writable.
 */
enum EskStatus esk_absorbed_mass_zipf(uint32_t n_items,
                                      double alpha,
                                      uint32_t m1,
                                      uint64_t beta_seed,
                                      double lambda,
                                      double *out);

/**
 * Tunes the eviction threshold for the same Zipf setup: writes the
 * smallest maximizer of the absorbed mass to `out_lambda` and the mass it
 * attains to `out_g`.
 *
 * # Safety
 *
 * `out_lambda` and `out_g` must be writable.
 */
enum EskStatus esk_zipf_tune(uint32_t n_items,
                             double alpha,
                             uint32_t m1,
                             uint64_t beta_seed,
                             uint64_t *out_lambda,
                             double *out_g);

/**
 * Writes the expected limiting per-arrival error (1 - g)/m2 to `out`.
 *
 * # Safety
 *
 * `out` must be writable.
 */
enum EskStatus esk_expected_error(double absorbed, uint32_t m2, double *out);

/**
 * Writes the high-probability bound on the tuned threshold under uniform
 * arrivals to `out`: with probability at least 1 - `delta` over the bucket
 * hash, the threshold stays below the bound.
 *
 * # Safety
 *
 * `out` must be writable.
 */
enum EskStatus esk_hp_bound(uint64_t n_items, uint32_t m1, double delta, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ESKETCH_H */
