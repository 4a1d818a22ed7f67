//! C ABI over `fqr-core`.
//!
//! Datasets and fits are opaque heap handles released with their `_free`
//! function. Every call returns an [`FqrStatus`]; on failure
//! [`fqr_last_error`] describes the most recent error on the calling thread.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fqr_core::design::{load_csv, DatasetManifest};
use fqr_core::solver::{FitResultJson, ZeroThreshold};
use fqr_core::{
    assemble_design, compute_gram_set, fit_close, fit_sql, FitResult, FqrError, FunctionalDataset, SolverConfig,
    SplineBasis,
};
use nalgebra::{DMatrix, DVector};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FqrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Convergence = 3,
    Bootstrap = 4,
    Io = 5,
    Panic = 6,
}

/// Functional dataset: response, scalar covariates and curves on a grid.
pub struct FqrDataset {
    inner: FunctionalDataset,
}

/// Fitted model.
pub struct FqrFit {
    inner: FitResult,
}

/// Model settings. `lambda = 0` gives the roughness-only fit and
/// `bandwidth = 0` the automatic bandwidth.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FqrFitOptions {
    pub tau: f64,
    pub num_subintervals: usize,
    pub degree: usize,
    pub q: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub bandwidth: f64,
    /// Fraction of the largest subinterval RMS below which a subinterval is null.
    pub zero_threshold: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &FqrError) -> FqrStatus {
    match err {
        FqrError::Convergence(_) | FqrError::LineSearch { .. } => FqrStatus::Convergence,
        FqrError::Bootstrap(_) => FqrStatus::Bootstrap,
        FqrError::Io { .. } => FqrStatus::Io,
        _ => FqrStatus::InvalidInput,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (FqrStatus, String)>) -> FqrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FqrStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            FqrStatus::Panic
        }
    }
}

fn lib<T>(r: fqr_core::Result<T>) -> Result<T, (FqrStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (FqrStatus, String) {
    (FqrStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (FqrStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path<'a>(p: *const c_char, what: &str) -> Result<&'a Path, (FqrStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| (FqrStatus::InvalidInput, format!("{what} is not valid UTF-8")))
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fqr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Defaults: cubic splines, 20 subintervals, second-derivative roughness.
#[no_mangle]
pub extern "C" fn fqr_fit_options_default(tau: f64) -> FqrFitOptions {
    FqrFitOptions {
        tau,
        num_subintervals: 20,
        degree: 3,
        q: 2,
        lambda: 0.01,
        gamma: 1e-6,
        bandwidth: 0.0,
        zero_threshold: 1e-3,
    }
}

/// Build a dataset from row-major arrays: `z` is `n x d` (include the
/// intercept column yourself), `x` is `m` consecutive `n x g` blocks.
///
/// # Safety
/// Every pointer must reference at least the stated number of doubles and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fqr_dataset_new(
    y: *const f64,
    n: usize,
    z: *const f64,
    d: usize,
    x: *const f64,
    m: usize,
    grid: *const f64,
    g: usize,
    out: *mut *mut FqrDataset,
) -> FqrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let y = slice(y, n, "y")?;
        let z = slice(z, n * d, "z")?;
        let x = slice(x, m * n * g, "x")?;
        let grid = slice(grid, g, "grid")?;
        let curves = (0..m)
            .map(|l| DMatrix::from_row_slice(n, g, &x[l * n * g..(l + 1) * n * g]))
            .collect();
        let ds = lib(FunctionalDataset::new(
            DVector::from_column_slice(y),
            DMatrix::from_row_slice(n, d, z),
            curves,
            grid.to_vec(),
        ))?;
        *out = Box::into_raw(Box::new(FqrDataset { inner: ds }));
        Ok(())
    })
}

/// Load a wide CSV described by a JSON manifest.
///
/// # Safety
/// `csv_path` and `manifest_path` must be NUL-terminated strings and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn fqr_dataset_load_csv(
    csv_path: *const c_char,
    manifest_path: *const c_char,
    out: *mut *mut FqrDataset,
) -> FqrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let manifest = lib(DatasetManifest::read(path(manifest_path, "manifest_path")?))?;
        let ds = lib(load_csv(path(csv_path, "csv_path")?, &manifest))?;
        *out = Box::into_raw(Box::new(FqrDataset { inner: ds }));
        Ok(())
    })
}

/// Number of samples, 0 for null.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn fqr_dataset_len(ds: *const FqrDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `ds` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fqr_dataset_free(ds: *mut FqrDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fit the model; the spline domain spans the dataset's grid.
///
/// # Safety
/// `ds` and `opts` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fqr_fit(ds: *const FqrDataset, opts: *const FqrFitOptions, out: *mut *mut FqrFit) -> FqrStatus {
    guard(|| {
        let ds = &ds.as_ref().ok_or_else(|| null("dataset"))?.inner;
        let o = *opts.as_ref().ok_or_else(|| null("options"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (a, b) = match (ds.grid.first(), ds.grid.last()) {
            (Some(a), Some(b)) => (*a, *b),
            _ => return Err((FqrStatus::InvalidInput, "dataset has an empty grid".into())),
        };
        let basis = lib(SplineBasis::new(a, b, o.num_subintervals, o.degree))?;
        let gram = lib(compute_gram_set(&basis, o.q))?;
        let design = lib(assemble_design(ds, &basis))?;
        let m = ds.num_functional();
        let mut cfg = SolverConfig::new(o.tau, m)
            .with_gamma(o.gamma)
            .with_lambda(o.lambda)
            .with_bandwidth(o.bandwidth);
        cfg.q = o.q;
        cfg.zero_threshold = ZeroThreshold::Relative(o.zero_threshold);
        let fit = if cfg.is_sql() {
            lib(fit_sql(&design, &basis, &gram, &cfg))?
        } else {
            lib(fit_close(&design, &basis, &gram, &cfg))?
        };
        *out = Box::into_raw(Box::new(FqrFit { inner: fit }));
        Ok(())
    })
}

/// # Safety
/// `fit` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fqr_fit_free(fit: *mut FqrFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Number of scalar coefficients, 0 for null.
///
/// # Safety
/// `fit` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn fqr_fit_num_scalar(fit: *const FqrFit) -> usize {
    fit.as_ref().map_or(0, |f| f.inner.alpha.len())
}

/// Whether the solver met its tolerances.
///
/// # Safety
/// `fit` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fqr_fit_converged(fit: *const FqrFit, out: *mut bool) -> FqrStatus {
    guard(|| {
        let f = fit.as_ref().ok_or_else(|| null("fit"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = f.inner.converged;
        Ok(())
    })
}

/// Copy α̂ into `out`, which holds `len >= fqr_fit_num_scalar(fit)` doubles.
///
/// # Safety
/// `fit` must be live and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fqr_fit_alpha(fit: *const FqrFit, out: *mut f64, len: usize) -> FqrStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        if len < f.alpha.len() {
            return Err((FqrStatus::InvalidInput, format!("buffer holds {len}, need {}", f.alpha.len())));
        }
        std::slice::from_raw_parts_mut(out, f.alpha.len()).copy_from_slice(f.alpha.as_slice());
        Ok(())
    })
}

/// Evaluate β̂_l at `count` points.
///
/// # Safety
/// `fit` must be live, `t` and `out` must hold `count` doubles.
#[no_mangle]
pub unsafe extern "C" fn fqr_fit_beta(
    fit: *const FqrFit,
    l: usize,
    t: *const f64,
    count: usize,
    out: *mut f64,
) -> FqrStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.inner;
        if l >= f.num_functional() {
            return Err((FqrStatus::InvalidInput, format!("covariate {l} out of range")));
        }
        let t = slice(t, count, "t")?;
        if count > 0 && out.is_null() {
            return Err(null("out"));
        }
        for (i, ti) in t.iter().enumerate() {
            *out.add(i) = lib(f.beta(l, *ti))?;
        }
        Ok(())
    })
}

/// Serialize the fit as JSON; release the string with [`fqr_string_free`].
///
/// # Safety
/// `fit` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fqr_fit_to_json(fit: *const FqrFit, out: *mut *mut c_char) -> FqrStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = serde_json::to_string(&FitResultJson::from(f)).map_err(|e| (FqrStatus::InvalidInput, e.to_string()))?;
        *out = CString::new(s).map_err(|e| (FqrStatus::InvalidInput, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn fqr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
