//! C ABI for the g2ldp toolkit.
//!
//! Objects are opaque handles created by `g2_*_new`/`g2_*_from_*` functions
//! and released with the matching `g2_*_free`. Every fallible function
//! returns a [`G2Status`]; on failure `g2_last_error_message` describes the
//! error on the calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use g2ldp::coefficients::{CoefficientSet, CoefficientSpec, Coefficients};
use g2ldp::controls::{total_cost, ControlPair, IntensityControl, ScalarControl};
use g2ldp::field_io::{field_from_csv, field_to_csv};
use g2ldp::integrator::SolverOptions;
use g2ldp::skeleton::{default_initial_state, solve_skeleton, Trajectory};
use g2ldp::spectral::{norm_v, norm_w, FluidParams, SpectralField};
use g2ldp::stochastic::simulate_spde;
use g2ldp::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum G2Status {
    Ok = 0,
    NullPointer = 1,
    InvalidParameter = 2,
    GridMisaligned = 3,
    BlowUp = 4,
    NoiseMismatch = 5,
    NotConverged = 6,
    Parse = 7,
    Io = 8,
    Panic = 9,
    Other = 10,
}

/// Fluid parameters.
pub struct G2Params(FluidParams);

/// Spectral velocity field.
pub struct G2Field(SpectralField);

/// Coefficient set.
pub struct G2Coefficients(CoefficientSet);

/// Solution trajectory sampled at every step node.
pub struct G2Trajectory(Trajectory);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> G2Status {
    match e {
        Error::InvalidParameter(_) | Error::GridTooSmall { .. } | Error::InadmissibleControl(_) | Error::Config(_) => {
            G2Status::InvalidParameter
        }
        Error::GridMisaligned { .. } => G2Status::GridMisaligned,
        Error::BlowUp { .. } => G2Status::BlowUp,
        Error::NoiseMismatch => G2Status::NoiseMismatch,
        Error::NotConverged { .. } => G2Status::NotConverged,
        Error::Parse { .. } | Error::Csv(_) => G2Status::Parse,
        Error::Io { .. } => G2Status::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `body`, mapping errors and panics to status codes.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> G2Status {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => G2Status::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed as `{what}`"));
            G2Status::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            G2Status::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure::Lib(Error::InvalidParameter(format!("`{what}` is not UTF-8: {e}"))))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn g2_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn g2_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn g2_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates fluid parameters for the torus of side `domain_side` with mode cutoff `modes`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn g2_params_new(alpha: f64, kappa: f64, domain_side: f64, modes: usize, out: *mut *mut G2Params) -> G2Status {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let p = FluidParams::new(alpha, kappa, domain_side, modes)?;
        *out = boxed(G2Params(p));
        Ok(())
    })
}

/// # Safety
/// `p` must come from `g2_params_new` or be NULL.
#[no_mangle]
pub unsafe extern "C" fn g2_params_free(p: *mut G2Params) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Built-in initial state with unit `V` norm.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn g2_field_default_initial(params: *const G2Params, out: *mut *mut G2Field) -> G2Status {
    guard(|| {
        let p = deref(params, "params")?;
        let out = out_ptr(out, "out")?;
        *out = boxed(G2Field(default_initial_state(&p.0)));
        Ok(())
    })
}

/// Zero field with mode cutoff `modes`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn g2_field_zeros(modes: usize, out: *mut *mut G2Field) -> G2Status {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if modes == 0 {
            return Err(Error::InvalidParameter("mode cutoff must be at least 1".into()).into());
        }
        *out = boxed(G2Field(SpectralField::zeros(modes)));
        Ok(())
    })
}

/// Parses a field from the CSV format written by `g2_field_to_csv`.
///
/// # Safety
/// `csv` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn g2_field_from_csv(csv: *const c_char, out: *mut *mut G2Field) -> G2Status {
    guard(|| {
        let s = text(csv, "csv")?;
        let out = out_ptr(out, "out")?;
        *out = boxed(G2Field(field_from_csv(s)?.field));
        Ok(())
    })
}

/// Serializes a field as CSV; release the result with `g2_string_free`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn g2_field_to_csv(field: *const G2Field, params: *const G2Params, out: *mut *mut c_char) -> G2Status {
    guard(|| {
        let f = deref(field, "field")?;
        let p = deref(params, "params")?;
        let out = out_ptr(out, "out")?;
        *out = CString::new(field_to_csv(&f.0, &p.0))
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .into_raw();
        Ok(())
    })
}

/// `||u||_V` and `||u||_W` of a field.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn g2_field_norms(field: *const G2Field, params: *const G2Params, norm_v_out: *mut f64, norm_w_out: *mut f64) -> G2Status {
    guard(|| {
        let f = deref(field, "field")?;
        let p = deref(params, "params")?;
        if f.0.cutoff() != p.0.mode_cutoff {
            return Err(Error::InvalidParameter("field and params have different cutoffs".into()).into());
        }
        *out_ptr(norm_v_out, "norm_v_out")? = norm_v(&f.0, &p.0);
        *out_ptr(norm_w_out, "norm_w_out")? = norm_w(&f.0, &p.0);
        Ok(())
    })
}

/// # Safety
/// `f` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn g2_field_free(f: *mut G2Field) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Default coefficient family.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn g2_coefficients_default(params: *const G2Params, out: *mut *mut G2Coefficients) -> G2Status {
    guard(|| {
        let p = deref(params, "params")?;
        let out = out_ptr(out, "out")?;
        *out = boxed(G2Coefficients(CoefficientSet::default_family(&p.0)?));
        Ok(())
    })
}

/// Coefficient family described by TOML text, for example
/// `diffusion = "zero"\njump_amplitudes = [1.0, 0.5]`.
///
/// # Safety
/// `spec` must be a NUL-terminated string and pointers valid.
#[no_mangle]
pub unsafe extern "C" fn g2_coefficients_from_toml(params: *const G2Params, spec: *const c_char, out: *mut *mut G2Coefficients) -> G2Status {
    guard(|| {
        let p = deref(params, "params")?;
        let s = text(spec, "spec")?;
        let out = out_ptr(out, "out")?;
        let spec: CoefficientSpec = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        *out = boxed(G2Coefficients(spec.build(&p.0)?));
        Ok(())
    })
}

/// Number of marks of a coefficient set.
///
/// # Safety
/// `c` must be valid or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn g2_coefficients_marks(c: *const G2Coefficients) -> usize {
    c.as_ref().map_or(0, |c| c.0.marks().len())
}

/// # Safety
/// `c` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn g2_coefficients_free(c: *mut G2Coefficients) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Builds a control pair from uniform cell values: `f` has `f_len` cells
/// (0 means `f = 0`), `g` has `g_len` cell-major values (0 means `g = 1`).
unsafe fn control_pair(horizon: f64, marks: usize, f: *const f64, f_len: usize, g: *const f64, g_len: usize) -> Result<ControlPair, Failure> {
    let f = slice(f, f_len, "f")?;
    let g = slice(g, g_len, "g")?;
    let f = if f.is_empty() {
        ScalarControl::zero(horizon)
    } else {
        ScalarControl::uniform(horizon, f.to_vec())?
    };
    let g = if g.is_empty() {
        IntensityControl::identity(horizon, marks)
    } else {
        IntensityControl::uniform(horizon, marks, g.to_vec())?
    };
    Ok(ControlPair::new(f, g)?)
}

fn options(dt: f64, nonlinear: bool) -> SolverOptions {
    let o = SolverOptions::default().with_dt(dt);
    if nonlinear {
        o
    } else {
        o.linear()
    }
}

/// Control cost `Q1(f) + Q2(g)` for uniform cell values as in `g2_solve_skeleton`.
///
/// # Safety
/// Arrays must hold the stated number of values; pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn g2_control_cost(
    coeffs: *const G2Coefficients,
    horizon: f64,
    f: *const f64,
    f_len: usize,
    g: *const f64,
    g_len: usize,
    out: *mut f64,
) -> G2Status {
    guard(|| {
        let c = deref(coeffs, "coeffs")?;
        let out = out_ptr(out, "out")?;
        let q = control_pair(horizon, c.0.marks().len(), f, f_len, g, g_len)?;
        *out = total_cost(&q, c.0.marks());
        Ok(())
    })
}

/// Solves the controlled skeleton equation on `[0, horizon]`.
///
/// # Safety
/// Arrays must hold the stated number of values; pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn g2_solve_skeleton(
    params: *const G2Params,
    coeffs: *const G2Coefficients,
    x0: *const G2Field,
    horizon: f64,
    dt: f64,
    nonlinear: bool,
    f: *const f64,
    f_len: usize,
    g: *const f64,
    g_len: usize,
    out: *mut *mut G2Trajectory,
) -> G2Status {
    guard(|| {
        let p = deref(params, "params")?;
        let c = deref(coeffs, "coeffs")?;
        let x = deref(x0, "x0")?;
        let out = out_ptr(out, "out")?;
        let q = control_pair(horizon, c.0.marks().len(), f, f_len, g, g_len)?;
        *out = boxed(G2Trajectory(solve_skeleton(&x.0, &q, &c.0, &p.0, &options(dt, nonlinear))?));
        Ok(())
    })
}

/// Simulates one path of the uncontrolled stochastic equation at noise level `eps`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn g2_simulate(
    params: *const G2Params,
    coeffs: *const G2Coefficients,
    x0: *const G2Field,
    eps: f64,
    horizon: f64,
    dt: f64,
    nonlinear: bool,
    seed: u64,
    out: *mut *mut G2Trajectory,
) -> G2Status {
    guard(|| {
        let p = deref(params, "params")?;
        let c = deref(coeffs, "coeffs")?;
        let x = deref(x0, "x0")?;
        let out = out_ptr(out, "out")?;
        let q = ControlPair::uncontrolled(horizon, c.0.marks().len());
        let (path, _) = simulate_spde(&x.0, eps, &q, &c.0, &p.0, &options(dt, nonlinear), seed)?;
        *out = boxed(G2Trajectory(path.trajectory));
        Ok(())
    })
}

/// Number of stored nodes (steps + 1).
///
/// # Safety
/// `t` must be valid or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn g2_trajectory_len(t: *const G2Trajectory) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Time, `V` norm and `W` norm at node `index`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn g2_trajectory_node(
    t: *const G2Trajectory,
    index: usize,
    time: *mut f64,
    norm_v_out: *mut f64,
    norm_w_out: *mut f64,
) -> G2Status {
    guard(|| {
        let t = deref(t, "trajectory")?;
        if index >= t.0.len() {
            return Err(Error::InvalidParameter(format!("node {index} out of range {}", t.0.len())).into());
        }
        *out_ptr(time, "time")? = t.0.times[index];
        *out_ptr(norm_v_out, "norm_v_out")? = t.0.norms_v[index];
        *out_ptr(norm_w_out, "norm_w_out")? = t.0.norms_w[index];
        Ok(())
    })
}

/// Copies the terminal state into a new field handle.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn g2_trajectory_final_state(t: *const G2Trajectory, out: *mut *mut G2Field) -> G2Status {
    guard(|| {
        let t = deref(t, "trajectory")?;
        let out = out_ptr(out, "out")?;
        *out = boxed(G2Field(t.0.final_state().clone()));
        Ok(())
    })
}

/// # Safety
/// `t` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn g2_trajectory_free(t: *mut G2Trajectory) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}
