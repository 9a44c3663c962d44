//! C interface to the sketch and its tuning routines: an opaque sketch
//! handle, integer status codes, and out-parameters for every fallible
//! call. The matching header is generated into include/esketch.h at build
//! time. All functions are safe to call from any thread as long as no two
//! threads touch the same handle concurrently; internal panics are caught
//! and surfaced as ESK_STATUS_INTERNAL rather than unwinding into C.

use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use esketch::analysis;
use esketch::sketch::{Sketch, SketchConfig};
use esketch::stream::{assign_buckets, ArrivalDistribution};
use esketch::tuning;
use esketch::Error;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EskStatus {
    /// Success.
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A parameter failed validation; nothing was modified.
    Invalid = 2,
    /// An item id was 0 or above the configured universe size.
    ItemOutOfRange = 3,
    /// The root finder could not certify its tolerance.
    NoConvergence = 4,
    /// The memory budget admits no sketch configuration.
    InfeasibleBudget = 5,
    /// Unexpected internal failure.
    Internal = 6,
}

/// Streaming counter over a fixed item universe; create with
/// `esk_sketch_new`, release with `esk_sketch_free`.
pub struct EskSketch {
    inner: Sketch,
}

fn status_of(err: &Error) -> EskStatus {
    match err {
        Error::InvalidParameter { .. } | Error::Config { .. } | Error::EmptyAssignment => {
            EskStatus::Invalid
        }
        Error::NoConvergence { .. } => EskStatus::NoConvergence,
        Error::InfeasibleBudget { .. } => EskStatus::InfeasibleBudget,
        _ => EskStatus::Internal,
    }
}

fn guarded(f: impl FnOnce() -> EskStatus) -> EskStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(EskStatus::Internal)
}

/// Version of the library as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn esk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a sketch with `m1` heavy buckets, a `d` x `m2` count-min block,
/// eviction threshold `lambda`, and item universe 1..=`n_items`. On success
/// writes the handle to `out` and returns ESK_STATUS_OK.
///
/// # Safety
///
/// `out` must be a valid pointer to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn esk_sketch_new(
    m1: u32,
    m2: u32,
    d: u32,
    lambda: u64,
    n_items: u32,
    beta_seed: u64,
    cm_seed: u64,
    out: *mut *mut EskSketch,
) -> EskStatus {
    if out.is_null() {
        return EskStatus::NullPointer;
    }
    guarded(|| {
        let config = SketchConfig::new(m1, m2, d, lambda, n_items, beta_seed, cm_seed);
        match Sketch::new(config) {
            Ok(inner) => {
                unsafe { out.write(Box::into_raw(Box::new(EskSketch { inner }))) };
                EskStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Releases a sketch created by `esk_sketch_new`; a null handle is a no-op.
///
/// # Safety
///
/// `sketch` must be null or a handle from `esk_sketch_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn esk_sketch_free(sketch: *mut EskSketch) {
    if !sketch.is_null() {
        drop(unsafe { Box::from_raw(sketch) });
    }
}

fn check_item(sketch: &EskSketch, item: u32) -> Result<(), EskStatus> {
    if item == 0 || item > sketch.inner.config().n_items {
        Err(EskStatus::ItemOutOfRange)
    } else {
        Ok(())
    }
}

/// Feeds one arrival of `item` (1-based) through the sketch.
///
/// # Safety
///
/// `sketch` must be a live handle from `esk_sketch_new`, not used
/// concurrently from another thread.
#[no_mangle]
pub unsafe extern "C" fn esk_sketch_update(sketch: *mut EskSketch, item: u32) -> EskStatus {
    let Some(sketch) = (unsafe { sketch.as_mut() }) else {
        return EskStatus::NullPointer;
    };
    guarded(|| {
        if let Err(s) = check_item(sketch, item) {
            return s;
        }
        sketch.inner.update(item);
        EskStatus::Ok
    })
}

/// Feeds `len` arrivals in order. The whole batch is validated first; on
/// ESK_STATUS_ITEM_OUT_OF_RANGE the sketch is unchanged.
///
/// # Safety
///
/// `sketch` as in `esk_sketch_update`; `items` must point to `len`
/// readable u32 values (null is accepted when `len` is 0).
#[no_mangle]
pub unsafe extern "C" fn esk_sketch_update_many(
    sketch: *mut EskSketch,
    items: *const u32,
    len: usize,
) -> EskStatus {
    let Some(sketch) = (unsafe { sketch.as_mut() }) else {
        return EskStatus::NullPointer;
    };
    if len == 0 {
        return EskStatus::Ok;
    }
    if items.is_null() {
        return EskStatus::NullPointer;
    }
    let items = unsafe { std::slice::from_raw_parts(items, len) };
    guarded(|| {
        if items.iter().any(|&i| check_item(sketch, i).is_err()) {
            return EskStatus::ItemOutOfRange;
        }
        for &item in items {
            sketch.inner.update(item);
        }
        EskStatus::Ok
    })
}

/// Writes the (never undercounting) estimate for `item` to `out`.
///
/// # Safety
///
/// `sketch` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn esk_sketch_estimate(
    sketch: *const EskSketch,
    item: u32,
    out: *mut u64,
) -> EskStatus {
    let Some(sketch) = (unsafe { sketch.as_ref() }) else {
        return EskStatus::NullPointer;
    };
    if out.is_null() {
        return EskStatus::NullPointer;
    }
    guarded(|| {
        if let Err(s) = check_item(sketch, item) {
            return s;
        }
        unsafe { out.write(sketch.inner.estimate(item)) };
        EskStatus::Ok
    })
}

/// Number of arrivals seen so far; 0 for a null handle.
///
/// # Safety
///
/// `sketch` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn esk_sketch_t(sketch: *const EskSketch) -> u64 {
    unsafe { sketch.as_ref() }.map_or(0, |s| s.inner.t())
}

/// Fraction of arrivals retained in the heavy block; 0 for a null handle.
///
/// # Safety
///
/// `sketch` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn esk_sketch_heavy_fraction(sketch: *const EskSketch) -> f64 {
    unsafe { sketch.as_ref() }.map_or(0.0, |s| s.inner.v_bar())
}

fn zipf_assignment(
    n_items: u32,
    alpha: f64,
    m1: u32,
    beta_seed: u64,
) -> Result<esketch::stream::BucketAssignment, Error> {
    let dist = ArrivalDistribution::zipf(n_items as usize, alpha)?;
    assign_buckets(&dist, m1, beta_seed)
}

/// Writes the limiting absorbed probability mass g for a Zipf(`alpha`)
/// stream over `n_items` items hashed into `m1` buckets by `beta_seed`,
/// evaluated at threshold `lambda`.
///
/// # Safety
///
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn esk_absorbed_mass_zipf(
    n_items: u32,
    alpha: f64,
    m1: u32,
    beta_seed: u64,
    lambda: f64,
    out: *mut f64,
) -> EskStatus {
    if out.is_null() {
        return EskStatus::NullPointer;
    }
    guarded(|| {
        let result = zipf_assignment(n_items, alpha, m1, beta_seed)
            .and_then(|a| analysis::absorbed_mass_total(&a, lambda));
        match result {
            Ok(g) => {
                unsafe { out.write(g) };
                EskStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Tunes the eviction threshold for the same Zipf setup: writes the
/// smallest maximizer of the absorbed mass to `out_lambda` and the mass it
/// attains to `out_g`.
///
/// # Safety
///
/// `out_lambda` and `out_g` must be writable.
#[no_mangle]
pub unsafe extern "C" fn esk_zipf_tune(
    n_items: u32,
    alpha: f64,
    m1: u32,
    beta_seed: u64,
    out_lambda: *mut u64,
    out_g: *mut f64,
) -> EskStatus {
    if out_lambda.is_null() || out_g.is_null() {
        return EskStatus::NullPointer;
    }
    guarded(|| {
        let result = zipf_assignment(n_items, alpha, m1, beta_seed)
            .and_then(|a| tuning::lambda_star(&a));
        match result {
            Ok(t) => {
                unsafe {
                    out_lambda.write(t.lambda_star);
                    out_g.write(t.g_at_star);
                }
                EskStatus::Ok
            }
            Err(e) => status_of(&e),
        }
    })
}

/// Writes the expected limiting per-arrival error (1 - g)/m2 to `out`.
///
/// # Safety
///
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn esk_expected_error(
    absorbed: f64,
    m2: u32,
    out: *mut f64,
) -> EskStatus {
    if out.is_null() {
        return EskStatus::NullPointer;
    }
    if m2 == 0 || !(0.0..=1.0).contains(&absorbed) {
        return EskStatus::Invalid;
    }
    unsafe { out.write(analysis::expected_limiting_error(absorbed, m2)) };
    EskStatus::Ok
}

/// Writes the high-probability bound on the tuned threshold under uniform
/// arrivals to `out`: with probability at least 1 - `delta` over the bucket
/// hash, the threshold stays below the bound.
///
/// # Safety
///
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn esk_hp_bound(
    n_items: u64,
    m1: u32,
    delta: f64,
    out: *mut f64,
) -> EskStatus {
    if out.is_null() {
        return EskStatus::NullPointer;
    }
    guarded(|| match tuning::hp_bound(n_items, m1, delta) {
        Ok(b) => {
            unsafe { out.write(b) };
            EskStatus::Ok
        }
        Err(e) => status_of(&e),
    })
}
