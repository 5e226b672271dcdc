//! C ABI for `stopcal`.
//!
//! Objects are opaque handles returned through out-pointers and released
//! with the matching `*_free`. Every fallible call
//! returns a [`StopcalStatus`]; on failure `stopcal_last_error()` holds a
//! message for the calling thread. Output arrays are caller-allocated.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use stopcal::birthdeath::{calibrate_bd, BirthDeathChain, PiecewiseLinearValue};
use stopcal::diffusion::{eigen_from_string, Eigenfunction, SpeedMeasure, XiKind};
use stopcal::forward::{solve_forward, ForwardOptions, ForwardSolution, Process};
use stopcal::inverse::{invert, InverseOptions, InverseReport, Verdict};
use stopcal::mc::{estimate_ctmc_laplace, estimate_laplace, SimConfig};
use stopcal::payoffs::{builtin, PayoffFamily};
use stopcal::uconvex::{Axis, GridFunction};
use stopcal::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopcalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidGrid = 3,
    InvalidMeasure = 4,
    NotUConvex = 5,
    NonConvexInput = 6,
    CollidingStates = 7,
    StepTooCoarse = 8,
    UnknownFamily = 9,
    Io = 10,
    Parse = 11,
    BufferTooSmall = 12,
    Panic = 13,
    Other = 14,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopcalXiKind {
    Absorbing = 0,
    Natural = 1,
}

/// Monte Carlo estimate.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StopcalEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub paths_used: usize,
    pub truncated_fraction: f64,
    pub lower_bound: f64,
}

/// Simulation settings; `stopcal_sim_default` fills the defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopcalSimConfig {
    pub seed: u64,
    pub paths: usize,
    pub dt: f64,
    pub t_max: f64,
    pub shards: usize,
    pub max_jumps: u64,
    pub bridge: bool,
}

pub struct StopcalMeasure(SpeedMeasure);
pub struct StopcalEigen(Eigenfunction);
pub struct StopcalPayoff(PayoffFamily);
pub struct StopcalForward(ForwardSolution);
pub struct StopcalInverse(InverseReport);
pub struct StopcalChain(BirthDeathChain);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> StopcalStatus {
    use StopcalStatus as S;
    match e {
        Error::InvalidGrid(_) | Error::BoundaryIndex { .. } => S::InvalidGrid,
        Error::InvalidMeasure(_) | Error::DegenerateString => S::InvalidMeasure,
        Error::NotUConvex { .. } => S::NotUConvex,
        Error::NonConvexInput { .. } => S::NonConvexInput,
        Error::CollidingStates { .. } => S::CollidingStates,
        Error::StepTooCoarse { .. } => S::StepTooCoarse,
        Error::UnknownFamily(_) => S::UnknownFamily,
        Error::Io(_) => S::Io,
        Error::Parse(_) | Error::Csv(_) | Error::Json(_) => S::Parse,
        Error::NaN(_) | Error::InvalidParameter(_) | Error::MixedSign { .. } => S::InvalidArgument,
        _ => S::Other,
    }
}

struct Fail(StopcalStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> StopcalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StopcalStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("panic inside stopcal");
            StopcalStatus::Panic
        }
    }
}

fn null() -> Fail {
    Fail(StopcalStatus::NullPointer, "null pointer argument".into())
}

unsafe fn arr<'a>(p: *const f64, n: usize) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return if n == 0 { Ok(&[]) } else { Err(null()) };
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn obj<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(null)
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(StopcalStatus::Parse, "string is not UTF-8".into()))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null());
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, cap: usize) -> Result<(), Fail> {
    if cap < src.len() {
        return Err(Fail(StopcalStatus::BufferTooSmall, format!("need {} slots, got {cap}", src.len())));
    }
    if dst.is_null() {
        return Err(null());
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

/// Message for the last failed call on this thread; valid until the next failure.
#[no_mangle]
pub extern "C" fn stopcal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn stopcal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library (or be null) and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn stopcal_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn release<T>(h: *mut T) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Releases the handle; null is ignored.
///
/// # Safety
/// The handle must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stopcal_measure_free(h: *mut StopcalMeasure) {
    release(h)
}

/// Releases the handle; null is ignored.
///
/// # Safety
/// The handle must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stopcal_eigen_free(h: *mut StopcalEigen) {
    release(h)
}

/// Releases the handle; null is ignored.
///
/// # Safety
/// The handle must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stopcal_payoff_free(h: *mut StopcalPayoff) {
    release(h)
}

/// Releases the handle; null is ignored.
///
/// # Safety
/// The handle must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stopcal_forward_free(h: *mut StopcalForward) {
    release(h)
}

/// Releases the handle; null is ignored.
///
/// # Safety
/// The handle must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stopcal_inverse_free(h: *mut StopcalInverse) {
    release(h)
}

/// Releases the handle; null is ignored.
///
/// # Safety
/// The handle must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stopcal_chain_free(h: *mut StopcalChain) {
    release(h)
}

/// Speed measure with a sampled density, no atoms.
///
/// # Safety
/// `grid` and `density` point to `n` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn stopcal_measure_from_density(
    grid: *const f64,
    density: *const f64,
    n: usize,
    xi: f64,
    xi_kind: StopcalXiKind,
    out: *mut *mut StopcalMeasure,
) -> StopcalStatus {
    guard(|| {
        let g = GridFunction::new(arr(grid, n)?.to_vec(), arr(density, n)?.to_vec(), Axis::X)?;
        let kind = match xi_kind {
            StopcalXiKind::Absorbing => XiKind::Absorbing,
            StopcalXiKind::Natural => XiKind::Natural,
        };
        put(out, StopcalMeasure(SpeedMeasure::new(g, vec![], xi, kind, 0.0)?))
    })
}

/// Speed measure from its JSON form.
///
/// # Safety
/// `json` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn stopcal_measure_from_json(json: *const c_char, out: *mut *mut StopcalMeasure) -> StopcalStatus {
    guard(|| put(out, StopcalMeasure(SpeedMeasure::from_json(text(json)?)?)))
}

/// Eigenfunction of the string with the given measure.
///
/// # Safety
/// `m` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn stopcal_eigen_from_measure(
    m: *const StopcalMeasure,
    rho: f64,
    out: *mut *mut StopcalEigen,
) -> StopcalStatus {
    guard(|| put(out, StopcalEigen(eigen_from_string(&obj(m)?.0, rho)?)))
}

/// Number of grid nodes of an eigenfunction (0 for null).
///
/// # Safety
/// `e` is a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn stopcal_eigen_len(e: *const StopcalEigen) -> usize {
    e.as_ref().map_or(0, |e| e.0.grid().len())
}

/// Copies the grid and `φ` values into caller buffers of capacity `cap`.
///
/// # Safety
/// `x_out` and `phi_out` hold at least `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn stopcal_eigen_values(
    e: *const StopcalEigen,
    x_out: *mut f64,
    phi_out: *mut f64,
    cap: usize,
) -> StopcalStatus {
    guard(|| {
        let e = &obj(e)?.0;
        copy_out(e.grid(), x_out, cap)?;
        copy_out(e.phi.values(), phi_out, cap)
    })
}

/// Builtin payoff family; `params_json` may be null for defaults.
///
/// # Safety
/// Strings are NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn stopcal_payoff_builtin(
    name: *const c_char,
    params_json: *const c_char,
    out: *mut *mut StopcalPayoff,
) -> StopcalStatus {
    guard(|| {
        let params = if params_json.is_null() {
            serde_json::json!({})
        } else {
            serde_json::from_str(text(params_json)?).map_err(|e| Fail(StopcalStatus::Parse, e.to_string()))?
        };
        put(out, StopcalPayoff(builtin(text(name)?, &params)?))
    })
}

/// `G(x, θ)` for a payoff handle (NaN for null).
///
/// # Safety
/// `p` is a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn stopcal_payoff_eval(p: *const StopcalPayoff, x: f64, theta: f64) -> f64 {
    p.as_ref().map_or(f64::NAN, |p| p.0.big_g(x, theta))
}

/// Forward solve on `n_theta` values of θ.
///
/// # Safety
/// Handles are live; `theta` holds `n_theta` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn stopcal_forward_solve(
    e: *const StopcalEigen,
    p: *const StopcalPayoff,
    rho: f64,
    theta: *const f64,
    n_theta: usize,
    out: *mut *mut StopcalForward,
) -> StopcalStatus {
    guard(|| {
        let sol = solve_forward(Process::Eigen(&obj(e)?.0), &obj(p)?.0, rho, arr(theta, n_theta)?, &ForwardOptions::default())?;
        put(out, StopcalForward(sol))
    })
}

/// Copies `V(θ)` and thresholds (`+inf` where not attained) for every θ.
///
/// # Safety
/// `v_out` and `x_star_out` hold at least `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn stopcal_forward_values(
    s: *const StopcalForward,
    v_out: *mut f64,
    x_star_out: *mut f64,
    cap: usize,
) -> StopcalStatus {
    guard(|| {
        let s = &obj(s)?.0;
        copy_out(&s.value(), v_out, cap)?;
        let xs: Vec<f64> = s.x_star.iter().map(|x| x.unwrap_or(f64::INFINITY)).collect();
        copy_out(&xs, x_star_out, cap)
    })
}

/// Inverse problem from sampled `(θ, V)` with default options.
///
/// # Safety
/// `theta`/`value` hold `n` doubles, `x_grid` holds `n_x`; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn stopcal_inverse_run(
    theta: *const f64,
    value: *const f64,
    n: usize,
    p: *const StopcalPayoff,
    rho: f64,
    x_grid: *const f64,
    n_x: usize,
    out: *mut *mut StopcalInverse,
) -> StopcalStatus {
    guard(|| {
        let vals = arr(value, n)?;
        if vals.iter().any(|v| !(*v > 0.0)) {
            return Err(Fail(StopcalStatus::InvalidArgument, "V must be positive".into()));
        }
        let v = GridFunction::new(arr(theta, n)?.to_vec(), vals.iter().map(|v| v.ln()).collect(), Axis::Theta)?;
        let r = invert(&v, &obj(p)?.0, rho, arr(x_grid, n_x)?, &InverseOptions::default())?;
        put(out, StopcalInverse(r))
    })
}

/// 1 when the value curve is consistent, 0 when not, -1 for null.
///
/// # Safety
/// `r` is a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn stopcal_inverse_consistent(r: *const StopcalInverse) -> i32 {
    match r.as_ref() {
        None => -1,
        Some(r) => i32::from(r.0.verdict == Verdict::Consistent),
    }
}

/// Report as JSON; release with `stopcal_string_free`. Null on failure.
///
/// # Safety
/// `r` is a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn stopcal_inverse_json(r: *const StopcalInverse) -> *mut c_char {
    let mut res = ptr::null_mut();
    guard(|| {
        res = into_c_string(obj(r)?.0.to_json()?);
        Ok(())
    });
    res
}

/// Birth-death chain from a piecewise-linear call value curve.
///
/// # Safety
/// `theta`/`value` hold `n` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn stopcal_birthdeath_calibrate(
    theta: *const f64,
    value: *const f64,
    n: usize,
    rho: f64,
    out: *mut *mut StopcalChain,
) -> StopcalStatus {
    guard(|| {
        let v = PiecewiseLinearValue::new(arr(theta, n)?.to_vec(), arr(value, n)?.to_vec())?;
        put(out, StopcalChain(calibrate_bd(&v, rho)?))
    })
}

/// Number of states (0 for null). Rates, probabilities and masses have one entry fewer.
///
/// # Safety
/// `c` is a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn stopcal_chain_len(c: *const StopcalChain) -> usize {
    c.as_ref().map_or(0, |c| c.0.states.len())
}

/// Copies states and `φ` (length `stopcal_chain_len`) and `p`, `λ`, masses
/// (one fewer). Any output pointer may be null to skip it.
///
/// # Safety
/// Non-null outputs hold at least `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn stopcal_chain_values(
    c: *const StopcalChain,
    states: *mut f64,
    phi: *mut f64,
    p: *mut f64,
    lambda: *mut f64,
    masses: *mut f64,
    cap: usize,
) -> StopcalStatus {
    guard(|| {
        let c = &obj(c)?.0;
        for (src, dst) in [(&c.states, states), (&c.phi, phi), (&c.p, p), (&c.lambda, lambda), (&c.masses, masses)] {
            if !dst.is_null() {
                copy_out(src, dst, cap)?;
            }
        }
        Ok(())
    })
}

/// Default simulation settings.
#[no_mangle]
pub extern "C" fn stopcal_sim_default() -> StopcalSimConfig {
    let d = SimConfig::default();
    StopcalSimConfig {
        seed: d.seed,
        paths: d.paths,
        dt: d.dt,
        t_max: d.t_max,
        shards: d.shards,
        max_jumps: d.max_jumps,
        bridge: d.bridge,
    }
}

fn sim(c: &StopcalSimConfig) -> SimConfig {
    SimConfig {
        seed: c.seed,
        paths: c.paths,
        dt: c.dt,
        t_max: c.t_max,
        shards: c.shards,
        max_jumps: c.max_jumps,
        bridge: c.bridge,
    }
}

fn estimate(e: stopcal::mc::Estimate) -> StopcalEstimate {
    StopcalEstimate {
        mean: e.mean,
        std_error: e.stderr,
        paths_used: e.paths_used,
        truncated_fraction: e.truncated_fraction,
        lower_bound: e.lower_bound,
    }
}

/// Monte Carlo `E_0[e^{-ρ H_x}]` for a density-only measure.
///
/// # Safety
/// `m` is a live handle; `cfg` and `out` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn stopcal_mc_laplace(
    m: *const StopcalMeasure,
    rho: f64,
    x: f64,
    cfg: *const StopcalSimConfig,
    out: *mut StopcalEstimate,
) -> StopcalStatus {
    guard(|| {
        let e = estimate_laplace(&obj(m)?.0, rho, x, &sim(obj(cfg)?))?;
        *out.as_mut().ok_or_else(null)? = estimate(e);
        Ok(())
    })
}

/// Monte Carlo `E_0[e^{-ρ H_n}]` for a chain.
///
/// # Safety
/// `c` is a live handle; `cfg` and `out` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn stopcal_mc_chain_laplace(
    c: *const StopcalChain,
    rho: f64,
    state: usize,
    cfg: *const StopcalSimConfig,
    out: *mut StopcalEstimate,
) -> StopcalStatus {
    guard(|| {
        let e = estimate_ctmc_laplace(&obj(c)?.0, rho, state, &sim(obj(cfg)?))?;
        *out.as_mut().ok_or_else(null)? = estimate(e);
        Ok(())
    })
}
