//! C ABI for the detector: an opaque model handle created from a model
//! config (JSON) plus a checkpoint, a detect call writing fixed-layout
//! records, and integer status codes. Thread-safe for concurrent detect
//! calls on one handle; the last error message is thread-local.

use ddetr::param::ParamStore;
use ddetr::transformer::{Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdetrStatus {
    DdetrOk = 0,
    DdetrNullArgument = 1,
    DdetrInvalidUtf8 = 2,
    DdetrLoadFailed = 3,
    DdetrBadInput = 4,
    DdetrInferenceFailed = 5,
    DdetrPanic = 6,
}

/// One detection in normalized image coordinates.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DdetrDetection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub class_id: u32,
}

/// Opaque model handle.
pub struct DdetrModel {
    model: Model,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Message for the most recent failure on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ddetr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |c| c.as_ptr())
    })
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, DdetrStatus> {
    if p.is_null() {
        return Err(DdetrStatus::DdetrNullArgument);
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8".into());
            Err(DdetrStatus::DdetrInvalidUtf8)
        }
    }
}

/// Build a model from a JSON model-config file and a checkpoint, writing the
/// handle to `out`. On failure `out` is untouched and a status is returned.
///
/// # Safety
/// `config_path` and `checkpoint_path` must be NUL-terminated strings and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ddetr_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut DdetrModel,
) -> DdetrStatus {
    if out.is_null() {
        return DdetrStatus::DdetrNullArgument;
    }
    let cfg_path = match path_arg(config_path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let ckpt_path = match path_arg(checkpoint_path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let built = std::panic::catch_unwind(|| -> Result<DdetrModel, String> {
        let text = std::fs::read_to_string(cfg_path).map_err(|e| e.to_string())?;
        let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(&mut store, &mut rng, &cfg).map_err(|e| e.to_string())?;
        store.load(ckpt_path).map_err(|e| e.to_string())?;
        Ok(DdetrModel { model, store })
    });
    match built {
        Ok(Ok(m)) => {
            *out = Box::into_raw(Box::new(m));
            DdetrStatus::DdetrOk
        }
        Ok(Err(msg)) => {
            set_error(msg);
            DdetrStatus::DdetrLoadFailed
        }
        Err(_) => {
            set_error("panic during model load".into());
            DdetrStatus::DdetrPanic
        }
    }
}

/// Number of object classes the model predicts, or 0 on a null handle.
///
/// # Safety
/// `model` must be null or a handle returned by [`ddetr_model_load`].
#[no_mangle]
pub unsafe extern "C" fn ddetr_model_num_classes(model: *const DdetrModel) -> u32 {
    if model.is_null() {
        return 0;
    }
    (*model).model.cfg.n_classes as u32
}

/// Run detection on one square `[3, size, size]` image (row-major,
/// channel-first, values in [0, 1]). Up to `max_out` detections are written
/// to `out` in descending score order; `*n_out` receives the count.
///
/// # Safety
/// `image` must point to `3 * size * size` doubles, `out` to `max_out`
/// records, and `n_out` to a writable size_t.
#[no_mangle]
pub unsafe extern "C" fn ddetr_model_detect(
    model: *const DdetrModel,
    image: *const f64,
    size: usize,
    max_out: usize,
    out: *mut DdetrDetection,
    n_out: *mut usize,
) -> DdetrStatus {
    if model.is_null() || image.is_null() || out.is_null() || n_out.is_null() {
        return DdetrStatus::DdetrNullArgument;
    }
    if size == 0 || max_out == 0 {
        set_error("size and max_out must be positive".into());
        return DdetrStatus::DdetrBadInput;
    }
    let handle = &*model;
    let pixels = std::slice::from_raw_parts(image, 3 * size * size);
    let result = std::panic::catch_unwind(|| {
        ddetr::train::predict(&handle.model, &handle.store, pixels, size, 0, max_out)
    });
    match result {
        Ok(Ok(dets)) => {
            let n = dets.len().min(max_out);
            let slots = std::slice::from_raw_parts_mut(out, max_out);
            for (slot, d) in slots.iter_mut().zip(dets.iter().take(n)) {
                *slot = DdetrDetection {
                    cx: d.cx,
                    cy: d.cy,
                    w: d.w,
                    h: d.h,
                    score: d.score.unwrap_or(0.0),
                    class_id: d.class as u32,
                };
            }
            *n_out = n;
            DdetrStatus::DdetrOk
        }
        Ok(Err(e)) => {
            set_error(e.to_string());
            DdetrStatus::DdetrInferenceFailed
        }
        Err(_) => {
            set_error("panic during inference".into());
            DdetrStatus::DdetrPanic
        }
    }
}

/// Destroy a handle created by [`ddetr_model_load`]. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer previously returned by `ddetr_model_load` and
/// not freed before.
#[no_mangle]
pub unsafe extern "C" fn ddetr_model_free(model: *mut DdetrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
