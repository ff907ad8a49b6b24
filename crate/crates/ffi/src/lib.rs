//! C ABI over the analysis toolkit.
//!
//! Every function returns a [`CbfStatus`]; on failure a message is available
//! from [`cbf_last_error_message`] on the same thread. Models are opaque
//! handles created by [`cbf_model_from_json`] and released with
//! [`cbf_model_free`]. Strings returned through `char **` outputs belong to
//! the caller and must be released with [`cbf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use cbf_minnorm::boundedness::{assemble_test_matrix, ray_probe, Inevitability, VerdictKind, VerdictReport};
use cbf_minnorm::controller::{evaluate_controller, Region};
use cbf_minnorm::model::{load_model_str, BarrierSpec, SystemModel};
use cbf_minnorm::zset::locate_zset;
use cbf_minnorm::CbfError;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Schema = 3,
    Parse = 4,
    DimensionMismatch = 5,
    InvalidArgument = 6,
    Eval = 7,
    CbfViolation = 8,
    NotAZPoint = 9,
    CrossCheckFailure = 10,
    AllUndefined = 11,
    InitialStateUnsafe = 12,
    BufferTooSmall = 13,
    Internal = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbfRegion {
    DPlus = 0,
    DMinus = 1,
    Exterior = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbfVerdictKind {
    Unbounded = 0,
    Bounded = 1,
    Indeterminate = 2,
}

/// Opaque model handle.
pub struct CbfModel {
    model: SystemModel,
    barrier: BarrierSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CbfStatus, String);

impl From<CbfError> for Failure {
    fn from(e: CbfError) -> Self {
        let status = match &e {
            CbfError::Schema(_) | CbfError::Io(_) => CbfStatus::Schema,
            CbfError::Parse { .. } => CbfStatus::Parse,
            CbfError::DimensionMismatch(_) => CbfStatus::DimensionMismatch,
            CbfError::InvalidAlpha(_) | CbfError::EmptySafeSet | CbfError::InvalidArgument(_) => {
                CbfStatus::InvalidArgument
            }
            CbfError::SignDisagreement { .. } | CbfError::StepSizeUnderflow { .. } => CbfStatus::InvalidArgument,
            CbfError::Eval { .. } => CbfStatus::Eval,
            CbfError::CbfViolation { .. } => CbfStatus::CbfViolation,
            CbfError::NotAZPoint { .. } => CbfStatus::NotAZPoint,
            CbfError::CrossCheckFailure { .. } => CbfStatus::CrossCheckFailure,
            CbfError::AllUndefined => CbfStatus::AllUndefined,
            CbfError::InitialStateUnsafe { .. } => CbfStatus::InitialStateUnsafe,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CbfStatus::NullPointer, format!("`{what}` is null"))
}

/// Run `body`, converting errors and panics into a status plus a stored message.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> CbfStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => CbfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CbfStatus::Internal
        }
    }
}

unsafe fn model_ref<'a>(model: *const CbfModel) -> Result<&'a CbfModel, Failure> {
    model.as_ref().ok_or_else(|| null("model"))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

fn to_c_string(s: String, out: *mut *mut c_char) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    let c = CString::new(s).map_err(|e| Failure(CbfStatus::Internal, e.to_string()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn json_error(e: serde_json::Error) -> Failure {
    Failure(CbfStatus::Internal, e.to_string())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cbf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static version string, `"<toolkit> (spec schema <n>)"`.
#[no_mangle]
pub extern "C" fn cbf_version() -> *const c_char {
    static VERSION: &[u8] = b"0.1.0 (spec schema 1)\0";
    VERSION.as_ptr().cast()
}

/// Build a model from a JSON system spec.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbf_model_from_json(json: *const c_char, out: *mut *mut CbfModel) -> CbfStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| Failure(CbfStatus::InvalidUtf8, e.to_string()))?;
        let (model, barrier) = load_model_str(text)?;
        *out = Box::into_raw(Box::new(CbfModel { model, barrier }));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`cbf_model_from_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cbf_model_free(model: *mut CbfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// State and input dimensions.
///
/// # Safety
/// `model` must be a live handle; `n` and `m` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbf_model_dims(model: *const CbfModel, n: *mut usize, m: *mut usize) -> CbfStatus {
    guard(|| {
        let h = model_ref(model)?;
        if n.is_null() || m.is_null() {
            return Err(null("n/m"));
        }
        *n = h.model.n();
        *m = h.model.m();
        Ok(())
    })
}

fn check_len(len: usize, expected: usize, what: &str) -> Result<(), Failure> {
    if len == expected {
        Ok(())
    } else {
        Err(Failure(
            CbfStatus::DimensionMismatch,
            format!("{what} has length {len}, expected {expected}"),
        ))
    }
}

/// Evaluate `u*(x)`. `u_out` receives `m` entries (NaN where undefined
/// outside the safe set); `h_out`, `n_out` and `region_out` may be null.
///
/// # Safety
/// `x` must point to `n` doubles and `u_out` to `m` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cbf_evaluate(
    model: *const CbfModel,
    x: *const f64,
    n: usize,
    u_out: *mut f64,
    m: usize,
    h_out: *mut f64,
    n_out: *mut f64,
    region_out: *mut CbfRegion,
) -> CbfStatus {
    guard(|| {
        let h = model_ref(model)?;
        check_len(n, h.model.n(), "x")?;
        check_len(m, h.model.m(), "u_out")?;
        let x = input(x, n, "x")?;
        if u_out.is_null() {
            return Err(null("u_out"));
        }
        let ev = evaluate_controller(&h.model, &h.barrier, x)?;
        slice::from_raw_parts_mut(u_out, m).copy_from_slice(&ev.u_star);
        if !h_out.is_null() {
            *h_out = ev.h_val;
        }
        if !n_out.is_null() {
            *n_out = ev.n_value;
        }
        if !region_out.is_null() {
            *region_out = match ev.region {
                Region::DPlus => CbfRegion::DPlus,
                Region::DMinus => CbfRegion::DMinus,
                Region::Exterior => CbfRegion::Exterior,
            };
        }
        Ok(())
    })
}

/// Locate discontinuity points. Writes up to `capacity` points row-major
/// into `points_out` (`capacity · n` doubles) and the total count into
/// `count_out`; returns `BufferTooSmall` when the count exceeds `capacity`.
///
/// # Safety
/// `points_out` must hold `capacity · n` doubles (may be null if `capacity`
/// is 0); `count_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbf_locate_zset(
    model: *const CbfModel,
    seeds: usize,
    tolerance: f64,
    points_out: *mut f64,
    capacity: usize,
    count_out: *mut usize,
) -> CbfStatus {
    guard(|| {
        let h = model_ref(model)?;
        if count_out.is_null() {
            return Err(null("count_out"));
        }
        let z = locate_zset(&h.model, &h.barrier, seeds, tolerance)?;
        *count_out = z.len();
        if z.len() > capacity {
            return Err(Failure(
                CbfStatus::BufferTooSmall,
                format!("{} points found, capacity {capacity}", z.len()),
            ));
        }
        if !z.is_empty() {
            if points_out.is_null() {
                return Err(null("points_out"));
            }
            let n = h.model.n();
            let out = slice::from_raw_parts_mut(points_out, capacity * n);
            for (k, p) in z.iter().enumerate() {
                out[k * n..(k + 1) * n].copy_from_slice(&p.x);
            }
        }
        Ok(())
    })
}

/// Boundedness verdict at `x`. `certificate_out` (n doubles, may be null)
/// receives the certificate direction when the verdict is `Unbounded` and
/// is left untouched otherwise; `inevitable_out` (may be null) is set to 1
/// when unboundedness is inevitable.
///
/// # Safety
/// `x` must point to `n` doubles; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbf_test_point(
    model: *const CbfModel,
    x: *const f64,
    n: usize,
    kind_out: *mut CbfVerdictKind,
    certificate_out: *mut f64,
    inevitable_out: *mut i32,
) -> CbfStatus {
    guard(|| {
        let h = model_ref(model)?;
        check_len(n, h.model.n(), "x")?;
        let x = input(x, n, "x")?;
        if kind_out.is_null() {
            return Err(null("kind_out"));
        }
        let report = VerdictReport::new(&assemble_test_matrix(&h.model, &h.barrier, x)?);
        *kind_out = match report.kind {
            VerdictKind::Unbounded => CbfVerdictKind::Unbounded,
            VerdictKind::Bounded => CbfVerdictKind::Bounded,
            VerdictKind::Indeterminate => CbfVerdictKind::Indeterminate,
        };
        if let (Some(v), false) = (&report.certificate_v, certificate_out.is_null()) {
            slice::from_raw_parts_mut(certificate_out, n).copy_from_slice(v);
        }
        if !inevitable_out.is_null() {
            *inevitable_out = i32::from(report.inevitability == Inevitability::InevitablyUnbounded);
        }
        Ok(())
    })
}

/// Full verdict report at `x` as JSON.
///
/// # Safety
/// `x` must point to `n` doubles; `json_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbf_test_point_json(
    model: *const CbfModel,
    x: *const f64,
    n: usize,
    json_out: *mut *mut c_char,
) -> CbfStatus {
    guard(|| {
        let h = model_ref(model)?;
        check_len(n, h.model.n(), "x")?;
        let x = input(x, n, "x")?;
        let report = VerdictReport::new(&assemble_test_matrix(&h.model, &h.barrier, x)?);
        to_c_string(serde_json::to_string(&report).map_err(json_error)?, json_out)
    })
}

/// Ray probe from `x` along unit `v` as JSON.
///
/// # Safety
/// `x` and `v` must each point to `n` doubles; `json_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cbf_ray_probe_json(
    model: *const CbfModel,
    x: *const f64,
    v: *const f64,
    n: usize,
    t_max: f64,
    samples: usize,
    json_out: *mut *mut c_char,
) -> CbfStatus {
    guard(|| {
        let h = model_ref(model)?;
        check_len(n, h.model.n(), "x")?;
        let (x, v) = (input(x, n, "x")?, input(v, n, "v")?);
        let report = ray_probe(&h.model, &h.barrier, x, v, t_max, samples)?;
        to_c_string(serde_json::to_string(&report).map_err(json_error)?, json_out)
    })
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cbf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
