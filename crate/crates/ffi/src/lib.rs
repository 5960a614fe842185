//! C ABI for the langevin-cutoff library.
//!
//! Models are opaque `LcModel` handles created by `lc_model_new_*` and released
//! with `lc_model_free`. Every fallible call returns an `LcStatus`; on failure
//! the message is available from `lc_last_error_message` on the same thread.
//! Matrices are dense and row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::{DMatrix, DVector};

use langevin_cutoff::cutoff::{default_tv_method, gaussian_tv_curve, mixing_time, spectral_data};
use langevin_cutoff::gaussian::tv_unit_norm;
use langevin_cutoff::lyapunov::sigma_matrix;
use langevin_cutoff::stability::{classify_linear, Verdict};
use langevin_cutoff::{builtin_force, make_linear_force, Error, ModelSpec};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// The model (or a matrix that must be Hurwitz) is not stable.
    Unstable = 3,
    /// Divergence, singular covariance or another numerical failure.
    Numerical = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LcVerdict {
    Stable = 0,
    Unstable = 1,
    /// The spectral abscissa is within roundoff of zero.
    Indeterminate = 2,
}

/// Mixing-time data at a starting point.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct LcMixing {
    pub eta: f64,
    pub nu: usize,
    pub tau: f64,
    pub t_mix: f64,
}

/// Opaque model handle.
pub struct LcModel {
    spec: ModelSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> LcStatus {
    match err {
        Error::Unstable { .. } | Error::UnstableModel(_) => LcStatus::Unstable,
        Error::Divergence { .. } | Error::Singular(_) | Error::Degenerate(_) | Error::Io(_) | Error::Json(_) => {
            LcStatus::Numerical
        }
        _ => LcStatus::InvalidArgument,
    }
}

fn fail(status: LcStatus, msg: impl Into<String>) -> LcStatus {
    set_last_error(msg.into());
    status
}

/// Runs `body` behind a panic guard and converts its error into a status.
fn guard(body: impl FnOnce() -> Result<(), LcStatus>) -> LcStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => LcStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(LcStatus::Panic, format!("panic: {msg}"))
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, LcStatus>;
}

impl<T> OrStatus<T> for langevin_cutoff::Result<T> {
    fn or_status(self) -> Result<T, LcStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], LcStatus> {
    if ptr.is_null() {
        return Err(fail(LcStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for `len` writes.
unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], LcStatus> {
    if ptr.is_null() {
        return Err(fail(LcStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// # Safety
/// `ptr` must be null or point to a live `LcModel`.
unsafe fn model<'a>(ptr: *const LcModel) -> Result<&'a LcModel, LcStatus> {
    ptr.as_ref().ok_or_else(|| fail(LcStatus::NullPointer, "model is null"))
}

/// # Safety
/// `m` must be valid for `d * d` reads.
unsafe fn square(m: *const f64, d: usize) -> Result<DMatrix<f64>, LcStatus> {
    if d == 0 {
        return Err(fail(LcStatus::InvalidArgument, "dimension must be positive"));
    }
    Ok(DMatrix::from_row_slice(d, d, slice(m, d * d, "matrix")?))
}

fn boxed(out: *mut *mut LcModel, spec: ModelSpec) -> Result<(), LcStatus> {
    if out.is_null() {
        return Err(fail(LcStatus::NullPointer, "out is null"));
    }
    unsafe { *out = Box::into_raw(Box::new(LcModel { spec })) };
    Ok(())
}

/// Linear model `F(q) = M q` with friction `gamma`. `m` is `d x d`, row-major.
/// The noise level is 0; pass it to the calls that need one.
///
/// # Safety
/// `m` must be valid for `d * d` reads and `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn lc_model_new_linear(m: *const f64, d: usize, gamma: f64, out: *mut *mut LcModel) -> LcStatus {
    guard(|| {
        let m = square(m, d)?;
        let spec = ModelSpec::new(make_linear_force(&m).or_status()?, gamma, 0.0).or_status()?;
        boxed(out, spec)
    })
}

/// Named builtin force field (`"harmonic"`, `"quartic"`, `"rotation-mild"`, ...).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lc_model_new_builtin(name: *const c_char, gamma: f64, out: *mut *mut LcModel) -> LcStatus {
    guard(|| {
        if name.is_null() {
            return Err(fail(LcStatus::NullPointer, "name is null"));
        }
        let name = CStr::from_ptr(name)
            .to_str()
            .map_err(|_| fail(LcStatus::InvalidArgument, "name is not UTF-8"))?;
        let spec = ModelSpec::new(builtin_force(name).or_status()?, gamma, 0.0).or_status()?;
        boxed(out, spec)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from `lc_model_new_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lc_model_free(model: *mut LcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Position dimension `d` (the state has length `2d`).
///
/// # Safety
/// `model` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn lc_model_dim(model: *const LcModel, out: *mut usize) -> LcStatus {
    guard(|| {
        let m = self::model(model)?;
        if out.is_null() {
            return Err(fail(LcStatus::NullPointer, "out is null"));
        }
        *out = m.spec.dim();
        Ok(())
    })
}

/// Stability of the linear dynamics with drift matrix `[[0, I], [-M, -gamma I]]`.
///
/// # Safety
/// `m` must be valid for `d * d` reads and `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn lc_classify_linear(m: *const f64, d: usize, gamma: f64, out: *mut LcVerdict) -> LcStatus {
    guard(|| {
        let m = square(m, d)?;
        if out.is_null() {
            return Err(fail(LcStatus::NullPointer, "out is null"));
        }
        let v = classify_linear(&m, gamma).or_status()?;
        *out = match v.verdict {
            Verdict::Stable => LcVerdict::Stable,
            Verdict::Unstable => LcVerdict::Unstable,
            Verdict::Indeterminate => LcVerdict::Indeterminate,
        };
        Ok(())
    })
}

/// Stationary fluctuation covariance `Sigma` (`A Sigma + Sigma A^T = -J` at
/// `q = 0`), written row-major into `out`, which must hold `(2d)^2` values.
///
/// # Safety
/// `model` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn lc_stationary_cov(model: *const LcModel, out: *mut f64, len: usize) -> LcStatus {
    guard(|| {
        let m = self::model(model)?;
        let n = 2 * m.spec.dim();
        if len != n * n {
            return Err(fail(LcStatus::InvalidArgument, format!("out must hold {} values, got {len}", n * n)));
        }
        let out = slice_mut(out, len, "out")?;
        let sigma = sigma_matrix(&m.spec).or_status()?;
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = sigma[(i, j)];
            }
        }
        Ok(())
    })
}

/// Spectral decay data and the mixing time from state `x` (length `2d`) at noise `eps`.
///
/// # Safety
/// `model` must be a live handle, `x` valid for `len` reads and `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn lc_mixing_time(
    model: *const LcModel,
    x: *const f64,
    len: usize,
    eps: f64,
    out: *mut LcMixing,
) -> LcStatus {
    guard(|| {
        let m = self::model(model)?;
        let x = DVector::from_column_slice(slice(x, len, "x")?);
        if out.is_null() {
            return Err(fail(LcStatus::NullPointer, "out is null"));
        }
        let sd = spectral_data(&m.spec, &x).or_status()?;
        *out = LcMixing {
            eta: sd.eta,
            nu: sd.nu,
            tau: sd.tau,
            t_mix: mixing_time(&sd, eps).or_status()?,
        };
        Ok(())
    })
}

/// `d_TV(N(X_t, 2 eps Sigma_t), N(0, 2 eps Sigma))` at each of the `n` times.
///
/// # Safety
/// `model` must be a live handle, `x` valid for `len` reads, `times` for `n`
/// reads and `out` for `n` writes.
#[no_mangle]
pub unsafe extern "C" fn lc_gaussian_tv_curve(
    model: *const LcModel,
    x: *const f64,
    len: usize,
    eps: f64,
    times: *const f64,
    n: usize,
    out: *mut f64,
) -> LcStatus {
    guard(|| {
        let m = self::model(model)?;
        let x = DVector::from_column_slice(slice(x, len, "x")?);
        let times = slice(times, n, "times")?;
        let out = slice_mut(out, n, "out")?;
        let method = default_tv_method(2 * m.spec.dim(), 0);
        let curve = gaussian_tv_curve(&m.spec, &x, eps, times, method).or_status()?;
        for (o, v) in out.iter_mut().zip(curve) {
            *o = v.value;
        }
        Ok(())
    })
}

/// `d_TV(N(x, I), N(0, I))` for `|x| = r`, that is `2 Phi(r/2) - 1`.
#[no_mangle]
pub extern "C" fn lc_tv_unit(r: f64) -> f64 {
    tv_unit_norm(r).value
}

/// Copies the last error message of the calling thread into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// including the terminating NUL, or 0 when there is no message.
///
/// # Safety
/// `buf` must be null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn lc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let k = (bytes.len() - 1).min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, k);
            *buf.add(k) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
