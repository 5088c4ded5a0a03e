//! C ABI over the interval predictor.
//!
//! A predictor is an opaque handle built from a checkpoint file and an
//! optional calibration artifact; callers feed the padded sensor vector and
//! query times, and receive order-fixed (lower, upper) bounds. All
//! functions return a [`QafStatus`] code; `include/qafdon.h` mirrors this
//! surface for C callers (regenerate it with cbindgen when the signatures
//! change).
//!
//! Thread safety: a loaded predictor is immutable, so concurrent reads from
//! multiple threads are fine. Load and free from one thread at a time.

use qafdon::conformal::CalibrationArtifact;
use qafdon::model::{self, order_fixed, PaddedInput, QafModel};
use qafdon::QafError;
use std::ffi::{c_char, CStr};
use std::path::Path;
use std::ptr;

/// Status codes returned by every FFI entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QafStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    IoError = 3,
    BadArtifact = 4,
    CheckpointMismatch = 5,
    BadInput = 6,
    DomainError = 7,
}

/// Opaque predictor handle: a loaded model plus an optional conformal offset.
pub struct QafPredictor {
    model: QafModel,
    q_hat: Option<f64>,
}

fn status_of(err: &QafError) -> QafStatus {
    match err {
        QafError::Io(_) => QafStatus::IoError,
        QafError::Data(_) | QafError::Calibration(_) => QafStatus::BadArtifact,
        QafError::ArtifactMismatch(_) => QafStatus::CheckpointMismatch,
        QafError::Domain(_) => QafStatus::DomainError,
        _ => QafStatus::BadInput,
    }
}

unsafe fn path_from(raw: *const c_char) -> Result<&'static Path, QafStatus> {
    if raw.is_null() {
        return Err(QafStatus::NullArgument);
    }
    let s = unsafe { CStr::from_ptr(raw) }
        .to_str()
        .map_err(|_| QafStatus::InvalidUtf8)?;
    Ok(Path::new(s))
}

/// Loads a predictor from a checkpoint file, optionally applying a
/// calibration artifact (pass NULL for raw intervals). The artifact must
/// hash-match the checkpoint. On success `*out` owns the handle; release it
/// with [`qaf_predictor_free`].
///
/// # Safety
/// `checkpoint_path` must be a valid NUL-terminated string;
/// `calibration_path` must be NULL or a valid NUL-terminated string;
/// `out` must be a valid pointer to a pointer.
#[no_mangle]
pub unsafe extern "C" fn qaf_predictor_load(
    checkpoint_path: *const c_char,
    calibration_path: *const c_char,
    out: *mut *mut QafPredictor,
) -> QafStatus {
    if out.is_null() {
        return QafStatus::NullArgument;
    }
    unsafe { *out = ptr::null_mut() };
    let ckpt_path = match unsafe { path_from(checkpoint_path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    let model = match model::load_checkpoint(ckpt_path) {
        Ok(m) => m,
        Err(e) => return status_of(&e),
    };
    let q_hat = if calibration_path.is_null() {
        None
    } else {
        let cal_path = match unsafe { path_from(calibration_path) } {
            Ok(p) => p,
            Err(s) => return s,
        };
        let artifact = match CalibrationArtifact::load(cal_path) {
            Ok(a) => a,
            Err(e) => return status_of(&e),
        };
        if let Err(e) = artifact.verify_checkpoint(ckpt_path) {
            return status_of(&e);
        }
        Some(artifact.q_hat)
    };
    let handle = Box::new(QafPredictor { model, q_hat });
    unsafe { *out = Box::into_raw(handle) };
    QafStatus::Ok
}

/// Releases a predictor. NULL is a no-op.
///
/// # Safety
/// `predictor` must be NULL or a pointer previously returned by
/// [`qaf_predictor_load`] that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn qaf_predictor_free(predictor: *mut QafPredictor) {
    if !predictor.is_null() {
        drop(unsafe { Box::from_raw(predictor) });
    }
}

/// Sensor count m the predictor expects.
///
/// # Safety
/// `predictor` must be a live handle; `out_m` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qaf_predictor_sensor_count(
    predictor: *const QafPredictor,
    out_m: *mut usize,
) -> QafStatus {
    if predictor.is_null() || out_m.is_null() {
        return QafStatus::NullArgument;
    }
    unsafe { *out_m = (*predictor).model.config().m };
    QafStatus::Ok
}

/// Prediction horizon T in seconds; query times must lie in (0, T].
///
/// # Safety
/// `predictor` must be a live handle; `out_horizon` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qaf_predictor_horizon(
    predictor: *const QafPredictor,
    out_horizon: *mut f64,
) -> QafStatus {
    if predictor.is_null() || out_horizon.is_null() {
        return QafStatus::NullArgument;
    }
    unsafe { *out_horizon = (*predictor).model.config().horizon };
    QafStatus::Ok
}

fn interval_at(
    p: &QafPredictor,
    input: &PaddedInput,
    t: f64,
) -> Result<(f64, f64), QafStatus> {
    let (lo, hi) = p
        .model
        .predict_quantiles(input, t)
        .map_err(|e| status_of(&e))?;
    let q = p.q_hat.unwrap_or(0.0);
    Ok(order_fixed(lo - q, hi + q))
}

fn build_input(
    sensors: *const f64,
    n_sensors: usize,
    valid_len: usize,
) -> Result<PaddedInput, QafStatus> {
    if sensors.is_null() {
        return Err(QafStatus::NullArgument);
    }
    let values = unsafe { std::slice::from_raw_parts(sensors, n_sensors) };
    PaddedInput::new(values.to_vec(), valid_len).map_err(|_| QafStatus::BadInput)
}

/// Interval at a single query time. `sensors` holds the padded input
/// function (`n_sensors` == model sensor count, zeros beyond `valid_len`).
///
/// # Safety
/// `predictor` must be a live handle; `sensors` must point to `n_sensors`
/// doubles; `out_lo` and `out_hi` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qaf_predictor_interval(
    predictor: *const QafPredictor,
    sensors: *const f64,
    n_sensors: usize,
    valid_len: usize,
    t: f64,
    out_lo: *mut f64,
    out_hi: *mut f64,
) -> QafStatus {
    if predictor.is_null() || out_lo.is_null() || out_hi.is_null() {
        return QafStatus::NullArgument;
    }
    let p = unsafe { &*predictor };
    let input = match build_input(sensors, n_sensors, valid_len) {
        Ok(i) => i,
        Err(s) => return s,
    };
    match interval_at(p, &input, t) {
        Ok((lo, hi)) => {
            unsafe {
                *out_lo = lo;
                *out_hi = hi;
            }
            QafStatus::Ok
        }
        Err(s) => s,
    }
}

/// Intervals at `n_times` query times, written into caller buffers of the
/// same length.
///
/// # Safety
/// `predictor` must be a live handle; `sensors` must point to `n_sensors`
/// doubles; `times`, `out_lo`, and `out_hi` must each point to `n_times`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn qaf_predictor_interval_curve(
    predictor: *const QafPredictor,
    sensors: *const f64,
    n_sensors: usize,
    valid_len: usize,
    times: *const f64,
    n_times: usize,
    out_lo: *mut f64,
    out_hi: *mut f64,
) -> QafStatus {
    if predictor.is_null() || times.is_null() || out_lo.is_null() || out_hi.is_null() {
        return QafStatus::NullArgument;
    }
    let p = unsafe { &*predictor };
    let input = match build_input(sensors, n_sensors, valid_len) {
        Ok(i) => i,
        Err(s) => return s,
    };
    let ts = unsafe { std::slice::from_raw_parts(times, n_times) };
    let los = unsafe { std::slice::from_raw_parts_mut(out_lo, n_times) };
    let his = unsafe { std::slice::from_raw_parts_mut(out_hi, n_times) };

    // The branch output only depends on the input function; reuse it.
    let phi = match p.model.branch_forward(&input) {
        Ok(phi) => phi,
        Err(e) => return status_of(&e),
    };
    let q = p.q_hat.unwrap_or(0.0);
    for ((t, lo), hi) in ts.iter().zip(los.iter_mut()).zip(his.iter_mut()) {
        let psi = match p.model.trunk_forward(*t) {
            Ok(psi) => psi,
            Err(e) => return status_of(&e),
        };
        let (raw_lo, raw_hi) = match p.model.quantile_bounds(&phi, &psi) {
            Ok(pair) => pair,
            Err(e) => return status_of(&e),
        };
        let (l, h) = order_fixed(raw_lo - q, raw_hi + q);
        *lo = l;
        *hi = h;
    }
    QafStatus::Ok
}

/// Human-readable description of a status code (static storage).
#[no_mangle]
pub extern "C" fn qaf_status_message(status: QafStatus) -> *const c_char {
    let msg: &'static [u8] = match status {
        QafStatus::Ok => b"ok\0",
        QafStatus::NullArgument => b"null argument\0",
        QafStatus::InvalidUtf8 => b"path is not valid UTF-8\0",
        QafStatus::IoError => b"io error\0",
        QafStatus::BadArtifact => b"malformed checkpoint or calibration artifact\0",
        QafStatus::CheckpointMismatch => b"calibration does not match this checkpoint\0",
        QafStatus::BadInput => b"bad input (sensor count, padding, or shape)\0",
        QafStatus::DomainError => b"query time outside (0, horizon]\0",
    };
    msg.as_ptr() as *const c_char
}

/// Library version (static storage).
#[no_mangle]
pub extern "C" fn qaf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
