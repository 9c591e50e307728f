//! C ABI for loading trained checkpoints, classifying images with token
//! ablation, and driving pipeline runs.
//!
//! Every function returns an [`SlStatus`]. On failure the message is kept
//! per thread and read with [`sl_last_error`]. Strings handed to the
//! caller are released with [`sl_string_free`]; handles with their own
//! `_free` function. No panic crosses the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use shortcut_lens::image::Image;
use shortcut_lens::mitigation::{ablate_and_classify, AblationMask};
use shortcut_lens::pipeline::{PipelineConfig, Runner, SelectRequest};
use shortcut_lens::store::Store;
use shortcut_lens::vit::{load_checkpoint, ViTModel};
use shortcut_lens::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlStatus {
    Ok = 0,
    InvalidArgument = 1,
    NotFound = 2,
    StageIncomplete = 3,
    Integrity = 4,
    Provider = 5,
    Io = 6,
    Internal = 7,
    Panic = 8,
}

/// A trained model loaded from a checkpoint directory.
pub struct SlModel {
    model: ViTModel,
}

/// An open pipeline run.
pub struct SlRun {
    runner: Runner,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SlModelInfo {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub tokens: usize,
    pub classes: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SlStatus {
    match e {
        Error::InvalidInput(_) | Error::InvalidState(_) | Error::Config(_) => SlStatus::InvalidArgument,
        Error::NotFound(_) => SlStatus::NotFound,
        Error::StageIncomplete(_) => SlStatus::StageIncomplete,
        Error::Integrity { .. } => SlStatus::Integrity,
        Error::Provider(_) => SlStatus::Provider,
        Error::Io(_) => SlStatus::Io,
        _ => SlStatus::Internal,
    }
}

struct Fail(SlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(SlStatus::InvalidArgument, msg.to_string())
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SlStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SlStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(&format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{name} is not valid UTF-8")))
}

fn owned_string(s: &str) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(SlStatus::Internal, "string contains a NUL byte".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next library call on the same thread.
#[no_mangle]
pub extern "C" fn sl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint directory (`checkpoint.json` plus parameters).
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_model_load(dir: *const c_char, out: *mut *mut SlModel) -> SlStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let dir = str_arg(dir, "dir")?;
        let model = load_checkpoint(Path::new(dir))?;
        *out = Box::into_raw(Box::new(SlModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`sl_model_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn sl_model_free(model: *mut SlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_model_info(model: *const SlModel, out: *mut SlModelInfo) -> SlStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            return Err(invalid("model or out is null"));
        };
        let c = m.model.config();
        *out = SlModelInfo {
            image_size: c.image_size,
            patch_size: c.patch_size,
            channels: c.channels,
            embed_dim: c.embed_dim,
            heads: c.heads,
            blocks: c.blocks,
            tokens: c.tokens(),
            classes: c.classes,
        };
        Ok(())
    })
}

/// Classifies one image, optionally dropping tokens first.
///
/// `pixels` holds `image_size² × channels` values in `[0, 1]`, row-major
/// with interleaved channels. `ablate` is NULL or one byte per patch token
/// (non-zero = remove). Class probabilities go to `probs` (`probs_len`
/// must equal the class count).
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn sl_model_classify(
    model: *const SlModel,
    pixels: *const f32,
    pixels_len: usize,
    ablate: *const u8,
    ablate_len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> SlStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| invalid("model is null"))?.model;
        if pixels.is_null() || probs.is_null() {
            return Err(invalid("pixels or probs is null"));
        }
        let c = m.config();
        if probs_len != c.classes {
            return Err(invalid(&format!("probs_len must be {}", c.classes)));
        }
        let px = std::slice::from_raw_parts(pixels, pixels_len).to_vec();
        let image = Image::new(c.image_size, c.channels, px)?;
        let p = if ablate.is_null() {
            m.forward(0, &image)?.probs
        } else {
            let flags = std::slice::from_raw_parts(ablate, ablate_len)
                .iter()
                .map(|&b| b != 0)
                .collect();
            let mask = AblationMask {
                image_id: 0,
                flags,
                guard_applied: false,
            };
            ablate_and_classify(m, &image, &mask)?.probs
        };
        std::slice::from_raw_parts_mut(probs, probs_len).copy_from_slice(&p);
        Ok(())
    })
}

/// Creates a run under `run_dir`. `config_toml` may be NULL for defaults.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_run_create(
    run_dir: *const c_char,
    config_toml: *const c_char,
    out: *mut *mut SlRun,
) -> SlStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let root = str_arg(run_dir, "run_dir")?;
        let config = if config_toml.is_null() {
            PipelineConfig::default()
        } else {
            PipelineConfig::from_toml_str(str_arg(config_toml, "config_toml")?)?
        };
        let runner = Runner::create(Store::new(root), &config)?;
        *out = Box::into_raw(Box::new(SlRun { runner }));
        Ok(())
    })
}

/// Opens an existing run.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_run_open(run_dir: *const c_char, run_id: *const c_char, out: *mut *mut SlRun) -> SlStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let runner = Runner::open(Store::new(str_arg(run_dir, "run_dir")?), str_arg(run_id, "run_id")?)?;
        *out = Box::into_raw(Box::new(SlRun { runner }));
        Ok(())
    })
}

/// # Safety
/// `run` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn sl_run_free(run: *mut SlRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

unsafe fn run_mut<'a>(run: *mut SlRun) -> Result<&'a mut Runner, Fail> {
    run.as_mut()
        .map(|r| &mut r.runner)
        .ok_or_else(|| invalid("run is null"))
}

/// Writes the run id; free it with [`sl_string_free`].
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_run_id(run: *mut SlRun, out: *mut *mut c_char) -> SlStatus {
    guard(|| {
        let r = run_mut(run)?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        *out = owned_string(r.run_id())?;
        Ok(())
    })
}

/// Runs every remaining stage. Non-zero `skip_concepts` skips captioning.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sl_run_all(run: *mut SlRun, skip_concepts: i32) -> SlStatus {
    guard(|| {
        run_mut(run)?.run_all(skip_concepts != 0)?;
        Ok(())
    })
}

/// Selects a cluster as an expert decision, or the automatic pick when
/// `cluster` is negative.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sl_run_select(run: *mut SlRun, cluster: i64) -> SlStatus {
    guard(|| {
        let request = match usize::try_from(cluster) {
            Ok(c) => SelectRequest::Expert(c),
            Err(_) => SelectRequest::Auto,
        };
        run_mut(run)?.select(request)?;
        Ok(())
    })
}

/// Mitigates the selected cluster (cached per cluster).
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sl_run_mitigate(run: *mut SlRun) -> SlStatus {
    guard(|| {
        run_mut(run)?.mitigate()?;
        Ok(())
    })
}

/// Writes the metrics JSON of a mitigated run; free it with
/// [`sl_string_free`].
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_run_metrics_json(run: *mut SlRun, out: *mut *mut c_char) -> SlStatus {
    guard(|| {
        let r = run_mut(run)?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let json = serde_json::to_string(&r.metrics()?).map_err(|e| Fail(SlStatus::Internal, e.to_string()))?;
        *out = owned_string(&json)?;
        Ok(())
    })
}
