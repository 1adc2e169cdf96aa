//! C interface to `gpspline`.
//!
//! Datasets and fits are opaque heap handles created by `gps_*_load` or
//! `gps_*_new`/`gps_fit` and released with the matching `gps_*_free`. Every
//! fallible call returns a [`GpsStatus`]; on failure the message is available
//! from [`gps_last_error_message`] on the same thread. Matrices cross the
//! boundary as row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gpspline::basis::{make_knots, SplineBasis};
use gpspline::config::RunConfig;
use gpspline::data::{Dataset, INPUT_DIM};
use gpspline::fit::{fit, Fit};
use gpspline::io::{load_fit, save_fit};
use gpspline::predict::Predictor;
use gpspline::Error;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result of an interface call. Nonzero values match the CLI exit codes
/// where a CLI counterpart exists.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpsStatus {
    Ok = 0,
    /// Bad input data, configuration, or file.
    Validation = 2,
    /// Chains did not reach the split-Rhat threshold.
    Convergence = 3,
    /// Sampler, prediction, or linear-algebra failure.
    Numerical = 4,
    /// Null pointer, invalid UTF-8, or undersized buffer.
    InvalidArgument = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Opaque observed dataset.
pub struct GpsDataset(Dataset);

/// Opaque fitted model with the data and configuration behind it.
pub struct GpsFit {
    cfg: RunConfig,
    ds: Dataset,
    fit: Fit,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(GpsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => GpsStatus::Validation,
            3 => GpsStatus::Convergence,
            _ => GpsStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(GpsStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status and the thread's
/// last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GpsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GpsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            GpsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(
    p: *mut f64,
    len: usize,
    need: usize,
    what: &str,
) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    if len < need {
        return Err(invalid(format!("{what} holds {len} values, need {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn store<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

fn config_from(toml: Option<&str>) -> Result<RunConfig, Failure> {
    match toml {
        Some(s) => Ok(RunConfig::from_toml_str(s)?),
        None => Ok(RunConfig::default()),
    }
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gps_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a dataset CSV from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gps_dataset_load(
    path: *const c_char,
    out: *mut *mut GpsDataset,
) -> GpsStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let path = str_arg(path, "path")?;
        store(out, GpsDataset(Dataset::load(path)?));
        Ok(())
    })
}

/// Builds a dataset from `y` (`n_times × n_locations`, row-major, first row
/// zero), `x` (`n_locations × 5` with columns H, S, I, Sx, Sy) and `times`.
/// Locations are named `L1`, `L2`, ...
///
/// # Safety
/// Buffers must hold the stated number of values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gps_dataset_new(
    y: *const f64,
    x: *const f64,
    times: *const f64,
    n_times: usize,
    n_locations: usize,
    out: *mut *mut GpsDataset,
) -> GpsStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let y = slice_arg(y, n_times * n_locations, "y")?;
        let x = slice_arg(x, n_locations * INPUT_DIM, "x")?;
        let times = slice_arg(times, n_times, "times")?;
        let ids = (1..=n_locations).map(|i| format!("L{i}")).collect();
        let ds = Dataset::new(
            DMatrix::from_row_slice(n_times, n_locations, y),
            DMatrix::from_row_slice(n_locations, INPUT_DIM, x),
            times.to_vec(),
            ids,
        )?;
        store(out, GpsDataset(ds));
        Ok(())
    })
}

/// Number of locations, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn gps_dataset_n_locations(ds: *const GpsDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n_locations())
}

/// Number of time points, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn gps_dataset_n_times(ds: *const GpsDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n_times())
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gps_dataset_free(ds: *mut GpsDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fits the model to `ds`. `config_toml` is a run configuration in TOML, or
/// null for the defaults. When sampling completes but the chains do not
/// converge, `*out` is still set and [`GpsStatus::Convergence`] is returned.
///
/// # Safety
/// `ds` must be a live dataset handle, `config_toml` null or NUL-terminated,
/// and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn gps_fit(
    ds: *const GpsDataset,
    config_toml: *const c_char,
    out: *mut *mut GpsFit,
) -> GpsStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let ds = &handle(ds, "dataset")?.0;
        let toml = if config_toml.is_null() {
            None
        } else {
            Some(str_arg(config_toml, "config_toml")?)
        };
        let cfg = config_from(toml)?;
        let f = fit(ds, &cfg.model, &cfg.sampler)?;
        let gate = f.require_convergence();
        store(
            out,
            GpsFit {
                cfg,
                ds: ds.clone(),
                fit: f,
            },
        );
        Ok(gate?)
    })
}

/// Loads a fit directory written by `gpspline fit` or [`gps_fit_save`].
/// Unconverged fits are refused unless `force` is nonzero.
///
/// # Safety
/// `dir` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn gps_fit_load(
    dir: *const c_char,
    force: bool,
    out: *mut *mut GpsFit,
) -> GpsStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let loaded = load_fit(str_arg(dir, "dir")?, force)?;
        store(
            out,
            GpsFit {
                cfg: loaded.cfg,
                ds: loaded.ds,
                fit: loaded.fit,
            },
        );
        Ok(())
    })
}

/// Writes the fit directory `dir`; an existing one is replaced only when
/// `force` is nonzero.
///
/// # Safety
/// `f` must be a live fit handle and `dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gps_fit_save(
    f: *const GpsFit,
    dir: *const c_char,
    force: bool,
) -> GpsStatus {
    guard(|| {
        let f = handle(f, "fit")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        save_fit(&f.fit, &f.ds, &f.cfg, dir, force)?;
        Ok(())
    })
}

/// Largest split-Rhat over all parameters, or NaN for a null handle.
///
/// # Safety
/// `f` must be null or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn gps_fit_max_rhat(f: *const GpsFit) -> f64 {
    f.as_ref().map_or(f64::NAN, |f| f.fit.diagnostics.max_rhat)
}

/// Number of time points of the fitted series, or 0 for a null handle.
///
/// # Safety
/// `f` must be null or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn gps_fit_n_times(f: *const GpsFit) -> usize {
    f.as_ref().map_or(0, |f| f.ds.n_times())
}

/// Releases a fit. Null is ignored.
///
/// # Safety
/// `f` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gps_fit_free(f: *mut GpsFit) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Predictive mean and 95% interval of the series at raw input `x`
/// (H, S, I, Sx, Sy). Each output buffer receives `n_times` values; `len` is
/// their capacity. `rejection_rate` may be null.
///
/// # Safety
/// `x` must hold 5 values, each output buffer `len` values, and `f` must be a
/// live fit handle.
#[no_mangle]
pub unsafe extern "C" fn gps_predict(
    f: *const GpsFit,
    x: *const f64,
    seed: u64,
    mean: *mut f64,
    lower95: *mut f64,
    upper95: *mut f64,
    len: usize,
    rejection_rate: *mut f64,
) -> GpsStatus {
    guard(|| {
        let f = handle(f, "fit")?;
        let raw: [f64; INPUT_DIM] = slice_arg(x, INPUT_DIM, "x")?
            .try_into()
            .expect("length checked");
        let t = f.ds.n_times();
        let mean = out_slice(mean, len, t, "mean")?;
        let lower = out_slice(lower95, len, t, "lower95")?;
        let upper = out_slice(upper95, len, t, "upper95")?;
        let predictor = Predictor::new(&f.fit.model, &f.fit.draws)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = predictor.predict_location(&f.fit.inputs.apply(&raw), &f.cfg.predict, &mut rng)?;
        mean.copy_from_slice(&s.mean);
        lower.copy_from_slice(&s.lower95);
        upper.copy_from_slice(&s.upper95);
        if let Some(r) = rejection_rate.as_mut() {
            *r = s.rejection_rate;
        }
        Ok(())
    })
}

/// Evaluates the radial spline basis with `n_knots` knots at `times`: `w`
/// and `dw` receive `n_times × n_knots` row-major values of the basis and its
/// time derivative; `len` is the capacity of each.
///
/// # Safety
/// `times` must hold `n_times` values and `w`, `dw` `len` values each.
#[no_mangle]
pub unsafe extern "C" fn gps_basis_eval(
    times: *const f64,
    n_times: usize,
    n_knots: usize,
    w: *mut f64,
    dw: *mut f64,
    len: usize,
) -> GpsStatus {
    guard(|| {
        let times = slice_arg(times, n_times, "times")?;
        let knots = make_knots(times, n_knots)?;
        let basis = SplineBasis::new(times, &knots)?;
        let need = n_times * n_knots;
        let w = out_slice(w, len, need, "w")?;
        let dw = out_slice(dw, len, need, "dw")?;
        for t in 0..n_times {
            for k in 0..n_knots {
                w[t * n_knots + k] = basis.w[(t, k)];
                dw[t * n_knots + k] = basis.dw[(t, k)];
            }
        }
        Ok(())
    })
}
