//! C ABI over `semisup`.
//!
//! Every fallible function returns a [`SemisupStatus`]; on failure the
//! message is available from [`semisup_last_error`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.
//! Strings returned through out-pointers are owned by the caller and freed
//! with [`semisup_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use semisup::bounds::{run_bounds, BoundsReport, BoundsSpec, DEFAULT_SPEC};
use semisup::checkpoint::{load_checkpoint, save_checkpoint};
use semisup::config::RunConfig;
use semisup::trainer::{evaluate, NoObserver, TrainData, Trainer};
use semisup::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SemisupStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Shape = 6,
    Domain = 7,
    Checkpoint = 8,
    NonFinite = 9,
    Unsupported = 10,
    /// A Rust panic was caught at the boundary.
    Internal = 11,
}

impl From<&Error> for SemisupStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io(_) => Self::Io,
            Error::Format { .. } => Self::Format,
            Error::Config(_) => Self::Config,
            Error::Shape(_) => Self::Shape,
            Error::Domain(_) => Self::Domain,
            Error::Checkpoint { .. } => Self::Checkpoint,
            Error::NonFinite { .. } => Self::NonFinite,
            Error::Unsupported(_) => Self::Unsupported,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(SemisupStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(SemisupStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SemisupStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SemisupStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SemisupStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SemisupStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SemisupStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn out_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    let c = CString::new(s).map_err(|_| Failure(SemisupStatus::Internal, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// Opaque training session.
pub struct SemisupTrainer {
    trainer: Trainer,
}

/// Opaque bounds verification report.
pub struct SemisupBoundsReport {
    report: BoundsReport,
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn semisup_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn semisup_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn trainer_from(config_toml: *const c_char, checkpoint: Option<*const c_char>) -> Result<Trainer, Failure> {
    let config = RunConfig::from_toml_str(str_arg(config_toml, "config_toml")?, &[])?;
    let resume = match checkpoint {
        Some(p) => Some(load_checkpoint(PathBuf::from(str_arg(p, "checkpoint_path")?))?),
        None => None,
    };
    let data = TrainData::from_config(&config)?;
    Ok(Trainer::new(config, data, resume)?)
}

/// Creates a session from TOML config text.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn semisup_trainer_new(config_toml: *const c_char, out: *mut *mut SemisupTrainer) -> SemisupStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let trainer = trainer_from(config_toml, None)?;
        *out = Box::into_raw(Box::new(SemisupTrainer { trainer }));
        Ok(())
    })
}

/// Creates a session resumed from a checkpoint file.
///
/// # Safety
/// Both strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn semisup_trainer_resume(
    config_toml: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut SemisupTrainer,
) -> SemisupStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let trainer = trainer_from(config_toml, Some(checkpoint_path))?;
        *out = Box::into_raw(Box::new(SemisupTrainer { trainer }));
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a handle from `semisup_trainer_new`/`_resume`.
#[no_mangle]
pub unsafe extern "C" fn semisup_trainer_free(t: *mut SemisupTrainer) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Advances by up to `steps` steps, stopping at the step budget. Writes the
/// number of steps taken to `taken` when it is non-null.
///
/// # Safety
/// `t` must be a live handle; `taken` null or writable.
#[no_mangle]
pub unsafe extern "C" fn semisup_trainer_step(t: *mut SemisupTrainer, steps: u64, taken: *mut u64) -> SemisupStatus {
    guard(|| {
        let t = t.as_mut().ok_or_else(|| null("trainer"))?;
        let mut n = 0;
        while n < steps && !t.trainer.is_done() {
            t.trainer.step(&mut NoObserver)?;
            n += 1;
        }
        if !taken.is_null() {
            *taken = n;
        }
        Ok(())
    })
}

/// Current step and total step budget.
///
/// # Safety
/// `t` must be a live handle; out-pointers null or writable.
#[no_mangle]
pub unsafe extern "C" fn semisup_trainer_progress(
    t: *const SemisupTrainer,
    step: *mut u64,
    total_steps: *mut u64,
) -> SemisupStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("trainer"))?;
        let s = t.trainer.state();
        if !step.is_null() {
            *step = s.step;
        }
        if !total_steps.is_null() {
            *total_steps = s.total_steps;
        }
        Ok(())
    })
}

/// All logged metrics rows as a JSON array.
///
/// # Safety
/// `t` must be a live handle; `out` writable. Free the result with
/// `semisup_string_free`.
#[no_mangle]
pub unsafe extern "C" fn semisup_trainer_metrics_json(t: *const SemisupTrainer, out: *mut *mut c_char) -> SemisupStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("trainer"))?;
        let json = serde_json::to_string(t.trainer.rows()).map_err(|e| Failure(SemisupStatus::Internal, e.to_string()))?;
        out_string(out, json)
    })
}

/// Top-1 error of the EMA and raw parameters on the configured test set.
///
/// # Safety
/// `t` must be a live handle; out-pointers null or writable.
#[no_mangle]
pub unsafe extern "C" fn semisup_trainer_evaluate(
    t: *const SemisupTrainer,
    top1_err_ema: *mut f64,
    top1_err_raw: *mut f64,
) -> SemisupStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("trainer"))?;
        let test = t
            .trainer
            .data()
            .test
            .as_ref()
            .ok_or_else(|| Failure(SemisupStatus::Config, "configuration defines no test set".into()))?;
        let batch = t.trainer.config().train.eval_batch;
        let s = t.trainer.state();
        let ema = evaluate(&s.ema, test, batch, 1)?.0;
        let raw = evaluate(&s.params, test, batch, 1)?.0;
        if !top1_err_ema.is_null() {
            *top1_err_ema = ema;
        }
        if !top1_err_raw.is_null() {
            *top1_err_raw = raw;
        }
        Ok(())
    })
}

/// Writes a checkpoint of the current state.
///
/// # Safety
/// `t` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn semisup_trainer_save(t: *const SemisupTrainer, path: *const c_char) -> SemisupStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("trainer"))?;
        save_checkpoint(t.trainer.state(), PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Runs the bounds checks on TOML spec text, or the bundled default spec
/// when `spec_toml` is null.
///
/// # Safety
/// `spec_toml` null or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn semisup_bounds_run(spec_toml: *const c_char, out: *mut *mut SemisupBoundsReport) -> SemisupStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = if spec_toml.is_null() {
            DEFAULT_SPEC
        } else {
            str_arg(spec_toml, "spec_toml")?
        };
        let report = run_bounds(&BoundsSpec::from_toml_str(text)?)?;
        *out = Box::into_raw(Box::new(SemisupBoundsReport { report }));
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a handle from `semisup_bounds_run`.
#[no_mangle]
pub unsafe extern "C" fn semisup_bounds_free(r: *mut SemisupBoundsReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Number of claims and how many passed.
///
/// # Safety
/// `r` must be a live handle; out-pointers null or writable.
#[no_mangle]
pub unsafe extern "C" fn semisup_bounds_summary(
    r: *const SemisupBoundsReport,
    claims: *mut u32,
    passed: *mut u32,
) -> SemisupStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("report"))?;
        if !claims.is_null() {
            *claims = r.report.claims.len() as u32;
        }
        if !passed.is_null() {
            *passed = r.report.claims.iter().filter(|c| c.passed).count() as u32;
        }
        Ok(())
    })
}

/// The full report as JSON.
///
/// # Safety
/// `r` must be a live handle; `out` writable. Free the result with
/// `semisup_string_free`.
#[no_mangle]
pub unsafe extern "C" fn semisup_bounds_report_json(r: *const SemisupBoundsReport, out: *mut *mut c_char) -> SemisupStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("report"))?;
        let json = serde_json::to_string(&r.report).map_err(|e| Failure(SemisupStatus::Internal, e.to_string()))?;
        out_string(out, json)
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn semisup_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
