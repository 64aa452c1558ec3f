//! C ABI over the `ksfm` solver.
//!
//! Instances and reports are opaque heap handles. Every fallible call
//! returns a status code; on failure the message is available from
//! `ksfm_last_error` until the next failing call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ksfm::config::Profile;
use ksfm::meta::{solve, Mode, SolveConfig, SolveReport};
use ksfm::oracle_core::{evaluate, generate_instance, GenParams, InstanceSpec, QueryLedger, Subset};
use ksfm::SfmError;

pub const KSFM_OK: i32 = 0;
/// A required pointer argument was null.
pub const KSFM_ERR_NULL: i32 = 1;
/// A string argument was not valid UTF-8.
pub const KSFM_ERR_UTF8: i32 = 2;
/// Bad instance, subset, parameter or configuration.
pub const KSFM_ERR_INPUT: i32 = 3;
/// The solver hit an internal invariant or step-size failure.
pub const KSFM_ERR_SOLVER: i32 = 4;
/// A Rust panic was caught at the boundary.
pub const KSFM_ERR_PANIC: i32 = 5;
/// Output buffer too small.
pub const KSFM_ERR_BUFFER: i32 = 6;

pub const KSFM_MODE_PARALLEL: i32 = 0;
pub const KSFM_MODE_SEQUENTIAL_WEAK: i32 = 1;
pub const KSFM_MODE_SEQUENTIAL_STRONG: i32 = 2;
pub const KSFM_MODE_BRUTE_FORCE: i32 = 3;

pub const KSFM_PROFILE_DESK: i32 = 0;
pub const KSFM_PROFILE_FAITHFUL: i32 = 1;

/// Opaque instance handle.
pub struct KsfmInstance {
    spec: InstanceSpec,
}

/// Opaque solve report handle.
pub struct KsfmReport {
    report: SolveReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(code: i32, msg: impl Into<String>) -> i32 {
    set_error(msg.into());
    code
}

fn from_sfm(e: SfmError) -> i32 {
    let code = if e.is_input_error() { KSFM_ERR_INPUT } else { KSFM_ERR_SOLVER };
    fail(code, e.to_string())
}

fn guard(f: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(c) => c,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(KSFM_ERR_PANIC, msg)
        }
    }
}

unsafe fn str_arg<'a>(s: *const c_char) -> Result<&'a str, i32> {
    if s.is_null() {
        return Err(fail(KSFM_ERR_NULL, "null string"));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(KSFM_ERR_UTF8, "string is not UTF-8"))
}

/// Message for the last failing call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ksfm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn ksfm_status_str(code: i32) -> *const c_char {
    let s: &'static [u8] = match code {
        KSFM_OK => b"ok\0",
        KSFM_ERR_NULL => b"null argument\0",
        KSFM_ERR_UTF8 => b"invalid UTF-8\0",
        KSFM_ERR_INPUT => b"invalid input\0",
        KSFM_ERR_SOLVER => b"solver failure\0",
        KSFM_ERR_PANIC => b"internal panic\0",
        KSFM_ERR_BUFFER => b"buffer too small\0",
        _ => b"unknown status\0",
    };
    s.as_ptr() as *const c_char
}

/// Parses an instance from JSON.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ksfm_instance_from_json(json: *const c_char, out: *mut *mut KsfmInstance) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(KSFM_ERR_NULL, "null out pointer");
        }
        let s = match str_arg(json) {
            Ok(s) => s,
            Err(c) => return c,
        };
        match InstanceSpec::from_json(s) {
            Ok(spec) => {
                *out = Box::into_raw(Box::new(KsfmInstance { spec }));
                KSFM_OK
            }
            Err(e) => from_sfm(e),
        }
    })
}

/// Generates an instance of family `kind` (planted, cut, coverage,
/// modular_plus_concave, explicit).
///
/// # Safety
/// `kind` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ksfm_instance_generate(
    kind: *const c_char,
    n: usize,
    k: usize,
    seed: u64,
    out: *mut *mut KsfmInstance,
) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(KSFM_ERR_NULL, "null out pointer");
        }
        let kind = match str_arg(kind) {
            Ok(s) => s,
            Err(c) => return c,
        };
        match generate_instance(kind, &GenParams::new(n, k), seed) {
            Ok(g) => {
                *out = Box::into_raw(Box::new(KsfmInstance { spec: g.instance }));
                KSFM_OK
            }
            Err(e) => from_sfm(e),
        }
    })
}

/// Ground-set size, or 0 for a null handle.
///
/// # Safety
/// `inst` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ksfm_instance_n(inst: *const KsfmInstance) -> usize {
    inst.as_ref().map_or(0, |i| i.spec.n())
}

/// Evaluates f on the set listed in `members[0..len]`.
///
/// # Safety
/// `inst` must be a live handle, `members` must point to `len` readable
/// elements (or be null when `len` is 0) and `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ksfm_instance_evaluate(
    inst: *const KsfmInstance,
    members: *const usize,
    len: usize,
    value: *mut f64,
) -> i32 {
    guard(|| {
        let Some(inst) = inst.as_ref() else {
            return fail(KSFM_ERR_NULL, "null instance");
        };
        if value.is_null() || (members.is_null() && len > 0) {
            return fail(KSFM_ERR_NULL, "null buffer");
        }
        let items: &[usize] = if len == 0 { &[] } else { std::slice::from_raw_parts(members, len) };
        let r = Subset::from_indices(inst.spec.n(), items.iter().copied())
            .and_then(|s| evaluate(&inst.spec, &s, &QueryLedger::new()));
        match r {
            Ok(v) => {
                *value = v;
                KSFM_OK
            }
            Err(e) => from_sfm(e),
        }
    })
}

/// Serializes the instance. Free the result with `ksfm_string_free`.
///
/// # Safety
/// `inst` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ksfm_instance_to_json(inst: *const KsfmInstance) -> *mut c_char {
    match inst.as_ref() {
        Some(i) => CString::new(i.spec.to_json()).map_or(ptr::null_mut(), CString::into_raw),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `inst` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ksfm_instance_free(inst: *mut KsfmInstance) {
    if !inst.is_null() {
        drop(Box::from_raw(inst));
    }
}

/// Runs the solver. `mode` and `profile` take the `KSFM_MODE_*` and
/// `KSFM_PROFILE_*` constants.
///
/// # Safety
/// `inst` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ksfm_solve(
    inst: *const KsfmInstance,
    mode: i32,
    k: usize,
    eps: f64,
    seed: u64,
    profile: i32,
    out: *mut *mut KsfmReport,
) -> i32 {
    guard(|| {
        let Some(inst) = inst.as_ref() else {
            return fail(KSFM_ERR_NULL, "null instance");
        };
        if out.is_null() {
            return fail(KSFM_ERR_NULL, "null out pointer");
        }
        let mode = match mode {
            KSFM_MODE_PARALLEL => Mode::Parallel,
            KSFM_MODE_SEQUENTIAL_WEAK => Mode::SequentialWeak,
            KSFM_MODE_SEQUENTIAL_STRONG => Mode::SequentialStrong,
            KSFM_MODE_BRUTE_FORCE => Mode::BruteForce,
            m => return fail(KSFM_ERR_INPUT, format!("unknown mode {m}")),
        };
        let profile = match profile {
            KSFM_PROFILE_DESK => Profile::Desk,
            KSFM_PROFILE_FAITHFUL => Profile::Faithful,
            p => return fail(KSFM_ERR_INPUT, format!("unknown profile {p}")),
        };
        let config = SolveConfig::new(mode, k, eps, profile, seed);
        match config.validate().and_then(|_| solve(&inst.spec, &config)) {
            Ok(report) => {
                *out = Box::into_raw(Box::new(KsfmReport { report }));
                KSFM_OK
            }
            Err(e) => from_sfm(e),
        }
    })
}

/// # Safety
/// `r` must be a live report handle.
#[no_mangle]
pub unsafe extern "C" fn ksfm_report_value(r: *const KsfmReport) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.report.value)
}

/// # Safety
/// `r` must be null or a live report handle.
#[no_mangle]
pub unsafe extern "C" fn ksfm_report_queries(r: *const KsfmReport) -> u64 {
    r.as_ref().map_or(0, |r| r.report.queries)
}

/// # Safety
/// `r` must be null or a live report handle.
#[no_mangle]
pub unsafe extern "C" fn ksfm_report_rounds(r: *const KsfmReport) -> u64 {
    r.as_ref().map_or(0, |r| r.report.rounds)
}

/// Copies the minimizer into `buf[0..cap]` and stores its size in `len`.
/// Returns `KSFM_ERR_BUFFER` (with `len` set) when `cap` is too small, so a
/// first call with `cap = 0` sizes the buffer.
///
/// # Safety
/// `r` must be a live handle, `len` writable, and `buf` must hold `cap`
/// elements (it may be null when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn ksfm_report_minimizer(r: *const KsfmReport, buf: *mut usize, cap: usize, len: *mut usize) -> i32 {
    guard(|| {
        let Some(r) = r.as_ref() else {
            return fail(KSFM_ERR_NULL, "null report");
        };
        if len.is_null() {
            return fail(KSFM_ERR_NULL, "null length pointer");
        }
        let m = &r.report.minimizer;
        *len = m.len();
        if m.len() > cap {
            return fail(KSFM_ERR_BUFFER, format!("minimizer has {} elements, buffer holds {cap}", m.len()));
        }
        if !m.is_empty() {
            if buf.is_null() {
                return fail(KSFM_ERR_NULL, "null buffer");
            }
            ptr::copy_nonoverlapping(m.as_ptr(), buf, m.len());
        }
        KSFM_OK
    })
}

/// Full report as JSON. Free the result with `ksfm_string_free`.
///
/// # Safety
/// `r` must be null or a live report handle.
#[no_mangle]
pub unsafe extern "C" fn ksfm_report_to_json(r: *const KsfmReport) -> *mut c_char {
    match r.as_ref() {
        Some(r) => CString::new(r.report.to_json()).map_or(ptr::null_mut(), CString::into_raw),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `r` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ksfm_report_free(r: *mut KsfmReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ksfm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
