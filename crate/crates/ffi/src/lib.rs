//! C interface to `prunelab`.
//!
//! Every function returns a [`PlStatus`]. On failure the message of the
//! error is kept per thread and can be read with [`pl_last_error`]. Models
//! are handed out as opaque [`PlModel`] pointers that the caller releases
//! with [`pl_model_free`]; strings returned through out-pointers are
//! released with [`pl_string_free`].
//!
//! Models held by the interface use 32-bit floats.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use prunelab::checkpoint::{load_model, save_checkpoint};
use prunelab::config::ExperimentConfig;
use prunelab::harness::{run_experiment, RunOptions};
use prunelab::model::{build_model, ArchSpec, Model, LABEL_HEAD};
use prunelab::pruning::{global_magnitude_prune_weights, natural_sparsity, zero_masked, Mask, DEFAULT_EPSILON};
use prunelab::{Error, Tensor};

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Format = 5,
    BadMagic = 6,
    VersionMismatch = 7,
    Truncated = 8,
    MaskMismatch = 9,
    WouldEmptyNetwork = 10,
    Divergence = 11,
    Config = 12,
    Io = 13,
    Panic = 14,
}

/// Weights, normalization statistics and mask of one network.
pub struct PlModel {
    model: Model<f32>,
    mask: Mask,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let text = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(e: &Error) -> PlStatus {
    match e {
        Error::Shape { .. } => PlStatus::Shape,
        Error::NonFinite(_) => PlStatus::NonFinite,
        Error::InvalidArgument(_) | Error::LabelOutOfRange { .. } | Error::NonScalarLoss(_) => PlStatus::InvalidArgument,
        Error::Format { .. } | Error::Csv(_) | Error::Json(_) => PlStatus::Format,
        Error::BadMagic { .. } => PlStatus::BadMagic,
        Error::VersionMismatch { .. } => PlStatus::VersionMismatch,
        Error::Truncated { .. } => PlStatus::Truncated,
        Error::MaskMismatch(_) => PlStatus::MaskMismatch,
        Error::WouldEmptyNetwork { .. } => PlStatus::WouldEmptyNetwork,
        Error::Divergence { .. } => PlStatus::Divergence,
        Error::Config { .. } => PlStatus::Config,
        Error::Io { .. } => PlStatus::Io,
    }
}

struct Failure(PlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PlStatus::NullPointer, format!("`{what}` is null"))
}

/// Runs `f`, turning errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PlStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            PlStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PlStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn model_ref<'a>(p: *const PlModel) -> Result<&'a PlModel, Failure> {
    p.as_ref().ok_or_else(|| null("model"))
}

unsafe fn model_mut<'a>(p: *mut PlModel) -> Result<&'a mut PlModel, Failure> {
    p.as_mut().ok_or_else(|| null("model"))
}

unsafe fn hand_out_string(s: String, out: *mut *mut c_char) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    let c = CString::new(s).map_err(|e| Failure(PlStatus::InvalidArgument, e.to_string()))?;
    *out = c.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn pl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a freshly initialized network with a full mask. `arch` is
/// `"mini_conv"` or `"mini_vgg"`; inputs are 3×`size`×`size`.
///
/// # Safety
/// `arch` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pl_model_build(
    arch: *const c_char,
    classes: usize,
    size: usize,
    seed: u64,
    out: *mut *mut PlModel,
) -> PlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut spec = ArchSpec::preset(text(arch, "arch")?, classes)?;
        spec.input = [3, size, size];
        spec.validate()?;
        let model = build_model::<f32>(&spec, seed)?;
        let mask = Mask::full(model.registry());
        *out = Box::into_raw(Box::new(PlModel { model, mask }));
        Ok(())
    })
}

/// Loads a checkpoint written by `prunelab`. Without a stored mask the
/// network gets a full one.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pl_model_load(path: *const c_char, out: *mut *mut PlModel) -> PlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (model, mask, _) = load_model::<f32>(&PathBuf::from(text(path, "path")?))?;
        let mask = mask.unwrap_or_else(|| Mask::full(model.registry()));
        *out = Box::into_raw(Box::new(PlModel { model, mask }));
        Ok(())
    })
}

/// Writes weights, mask and architecture sidecar (`<path>.json`).
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pl_model_save(model: *const PlModel, path: *const c_char) -> PlStatus {
    guard(|| {
        let m = model_ref(model)?;
        save_checkpoint(&PathBuf::from(text(path, "path")?), &m.model, Some(&m.mask), None)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn pl_model_free(model: *mut PlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of prunable weights and how many of them are unmasked.
///
/// # Safety
/// `model` must be a live handle; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn pl_model_counts(model: *const PlModel, prunable: *mut usize, remaining: *mut usize) -> PlStatus {
    guard(|| {
        let m = model_ref(model)?;
        if prunable.is_null() || remaining.is_null() {
            return Err(null("prunable/remaining"));
        }
        *prunable = m.mask.total();
        *remaining = m.mask.remaining();
        Ok(())
    })
}

/// One step of global magnitude pruning at `rate` over the unmasked
/// weights; pruned weights are set to zero. `newly_pruned` may be null.
///
/// # Safety
/// `model` must be a live handle; `newly_pruned` null or writable.
#[no_mangle]
pub unsafe extern "C" fn pl_model_prune(model: *mut PlModel, rate: f64, newly_pruned: *mut usize) -> PlStatus {
    guard(|| {
        let m = model_mut(model)?;
        let out = global_magnitude_prune_weights(m.model.registry(), &m.mask, rate)?;
        m.mask = out.mask;
        zero_masked(m.model.registry_mut(), &m.mask);
        if !newly_pruned.is_null() {
            *newly_pruned = out.newly_pruned;
        }
        Ok(())
    })
}

/// Eval-mode label logits for `n` images laid out as `[n, 3, size, size]`.
/// `logits` must hold `n * classes` floats.
///
/// # Safety
/// `images` must point to `images_len` floats and `logits` to
/// `logits_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn pl_model_predict(
    model: *const PlModel,
    images: *const f32,
    images_len: usize,
    n: usize,
    logits: *mut f32,
    logits_len: usize,
) -> PlStatus {
    guard(|| {
        let m = model_ref(model)?;
        if images.is_null() || logits.is_null() {
            return Err(null("images/logits"));
        }
        let [c, h, w] = m.model.spec().input;
        if n == 0 || images_len != n * c * h * w {
            return Err(Failure(
                PlStatus::Shape,
                format!("{images_len} floats given for {n} images of {c}x{h}x{w}"),
            ));
        }
        let classes = m.model.spec().classes;
        if logits_len != n * classes {
            return Err(Failure(PlStatus::Shape, format!("logits buffer of {logits_len}, need {}", n * classes)));
        }
        let batch = Tensor::new(vec![n, c, h, w], std::slice::from_raw_parts(images, images_len).to_vec())?;
        let out = m.model.predict(&batch, LABEL_HEAD)?;
        std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(out.data());
        Ok(())
    })
}

/// Natural-sparsity report as JSON. `epsilon <= 0` selects the smallest
/// positive normal `f32`. Free the string with [`pl_string_free`].
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pl_model_sparsity_json(model: *const PlModel, epsilon: f64, out: *mut *mut c_char) -> PlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let eps = if epsilon > 0.0 { epsilon } else { DEFAULT_EPSILON };
        let report = natural_sparsity(m.model.registry(), eps);
        hand_out_string(serde_json::to_string(&report).map_err(Error::from)?, out)
    })
}

/// Runs (or resumes) the experiment described by a TOML config file and
/// writes its records and summary. `threads == 0` uses `TS_THREADS` or the
/// machine's parallelism. `computed` may be null.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `computed` null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pl_run_experiment(config_path: *const c_char, threads: usize, computed: *mut usize) -> PlStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(&PathBuf::from(text(config_path, "config_path")?))?;
        let mut opts = RunOptions::from_env();
        if threads > 0 {
            opts.threads = threads;
        }
        opts.verbose = false;
        let summary = run_experiment(&cfg, &opts)?;
        if !computed.is_null() {
            *computed = summary.computed;
        }
        Ok(())
    })
}
