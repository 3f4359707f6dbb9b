//! C ABI surface over the simulator and navigation stack.
//!
//! All functions are panic-free: failures return a status code (or null) and
//! store a message retrievable with `navsim_last_error`. Handles returned by
//! `_load` functions are opaque and must be released with the matching
//! `_free` function exactly once.

use navsim::config::{load_config, RunConfig};
use navsim::congestion::{congestion, update_threshold};
use navsim::lidar::{LidarScan, N_RAYS};
use navsim::perception::{minpool, N_BINS};
use navsim::runner::{run_eval, RunError};
use navsim::world::{load_scenario, ScenarioSpec};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

/// Status code returned by fallible entry points.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NavsimStatus {
    /// Call succeeded.
    NavsimOk = 0,
    /// A required pointer argument was null.
    NavsimNullArgument = 1,
    /// A string argument was not valid UTF-8.
    NavsimInvalidUtf8 = 2,
    /// Input text failed to parse or validate.
    NavsimParseError = 3,
    /// A filesystem operation failed.
    NavsimIoError = 4,
    /// The operation started but could not finish.
    NavsimRuntimeError = 5,
}

use NavsimStatus::*;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

/// Record a message for later retrieval through `navsim_last_error`.
fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(e: &RunError) -> NavsimStatus {
    match e {
        RunError::Config(_) | RunError::Scenario(_) => NavsimParseError,
        RunError::Io(_) => NavsimIoError,
        _ => NavsimRuntimeError,
    }
}

/// Opaque parsed scenario handle.
pub struct NavsimScenario(ScenarioSpec);

/// Opaque parsed configuration handle.
pub struct NavsimConfig(RunConfig);

/// Copy the most recent error message for this thread into `buf`.
///
/// Returns the full message length in bytes (excluding the terminator); the
/// copy is truncated to `cap - 1` bytes and always NUL-terminated when
/// `cap > 0`. A null `buf` only queries the length.
#[no_mangle]
pub extern "C" fn navsim_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn navsim_version() -> *const c_char {
    const V: &[u8] = b"0.1.0\0";
    V.as_ptr() as *const c_char
}

/// Scan-wide congestion of a 1080-ray lidar scan.
///
/// `ranges` must point to exactly 1080 readings in meters; `d_s` is the
/// sensing threshold used as the logarithm base. Writes the scalar into
/// `out` on success.
#[no_mangle]
pub extern "C" fn navsim_congestion(
    ranges: *const f64,
    len: usize,
    d_s: f64,
    out: *mut f64,
) -> NavsimStatus {
    if ranges.is_null() || out.is_null() {
        set_error("null pointer argument");
        return NavsimNullArgument;
    }
    if len != N_RAYS {
        set_error("scan must contain exactly 1080 ranges");
        return NavsimParseError;
    }
    let slice = unsafe { std::slice::from_raw_parts(ranges, len) };
    let scan = LidarScan::from_ranges(slice.to_vec(), 0.0);
    unsafe { *out = congestion(&scan, d_s) };
    NavsimOk
}

/// Sub-goal update distance for a congestion value; pure and infallible.
#[no_mangle]
pub extern "C" fn navsim_update_threshold(c: f64) -> f64 {
    update_threshold(c)
}

/// Min-pool a 1080-ray scan into 36 sector minima.
///
/// Writes 36 pooled ranges (meters) into `out`.
#[no_mangle]
pub extern "C" fn navsim_minpool(
    ranges: *const f64,
    len: usize,
    out: *mut f64,
) -> NavsimStatus {
    if ranges.is_null() || out.is_null() {
        set_error("null pointer argument");
        return NavsimNullArgument;
    }
    if len != N_RAYS {
        set_error("scan must contain exactly 1080 ranges");
        return NavsimParseError;
    }
    let slice = unsafe { std::slice::from_raw_parts(ranges, len) };
    let sparse = minpool(&LidarScan::from_ranges(slice.to_vec(), 0.0));
    unsafe { std::ptr::copy_nonoverlapping(sparse.ranges36.as_ptr(), out, N_BINS) };
    NavsimOk
}

fn cstr_utf8<'a>(p: *const c_char) -> Result<&'a str, NavsimStatus> {
    if p.is_null() {
        set_error("null pointer argument");
        return Err(NavsimNullArgument);
    }
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        NavsimInvalidUtf8
    })
}

/// Parse and validate scenario text; returns null on failure.
#[no_mangle]
pub extern "C" fn navsim_scenario_load(text: *const c_char) -> *mut NavsimScenario {
    let Ok(text) = cstr_utf8(text) else {
        return std::ptr::null_mut();
    };
    match load_scenario(text) {
        Ok(spec) => Box::into_raw(Box::new(NavsimScenario(spec))),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Release a scenario handle; null is ignored.
#[no_mangle]
pub extern "C" fn navsim_scenario_free(s: *mut NavsimScenario) {
    if !s.is_null() {
        drop(unsafe { Box::from_raw(s) });
    }
}

/// Number of pedestrians in a loaded scenario; -1 for a null handle.
#[no_mangle]
pub extern "C" fn navsim_scenario_ped_count(s: *const NavsimScenario) -> i64 {
    if s.is_null() {
        set_error("null pointer argument");
        return -1;
    }
    unsafe { &*s }.0.pedestrians.len() as i64
}

/// Goal position of a loaded scenario, written into `x` and `y`.
#[no_mangle]
pub extern "C" fn navsim_scenario_goal(
    s: *const NavsimScenario,
    x: *mut f64,
    y: *mut f64,
) -> NavsimStatus {
    if s.is_null() || x.is_null() || y.is_null() {
        set_error("null pointer argument");
        return NavsimNullArgument;
    }
    let goal = unsafe { &*s }.0.goal;
    unsafe {
        *x = goal.x;
        *y = goal.y;
    }
    NavsimOk
}

/// Load a run configuration from a TOML file; returns null on failure.
#[no_mangle]
pub extern "C" fn navsim_config_load(path: *const c_char) -> *mut NavsimConfig {
    let Ok(path) = cstr_utf8(path) else {
        return std::ptr::null_mut();
    };
    match load_config(Path::new(path), None) {
        Ok(cfg) => Box::into_raw(Box::new(NavsimConfig(cfg))),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Release a configuration handle; null is ignored.
#[no_mangle]
pub extern "C" fn navsim_config_free(c: *mut NavsimConfig) {
    if !c.is_null() {
        drop(unsafe { Box::from_raw(c) });
    }
}

/// Evaluate the configured scenario for `episodes` episodes.
///
/// Writes per-episode CSVs and metrics JSON into the configured output
/// directory and returns the metrics JSON document as a heap string owned
/// by the caller (release with `navsim_string_free`). Null on failure.
#[no_mangle]
pub extern "C" fn navsim_eval(c: *const NavsimConfig, episodes: usize) -> *mut c_char {
    if c.is_null() {
        set_error("null pointer argument");
        return std::ptr::null_mut();
    }
    let cfg = &unsafe { &*c }.0;
    match run_eval(cfg, episodes) {
        Ok(out) => {
            let json = out.report.to_json(&out.config_hash).replace('\0', " ");
            CString::new(json).unwrap().into_raw()
        }
        Err(e) => {
            set_error(&e.to_string());
            let _ = status_of(&e);
            std::ptr::null_mut()
        }
    }
}

/// Release a string returned by this library; null is ignored.
#[no_mangle]
pub extern "C" fn navsim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
