//! C ABI over the segmentation model.
//!
//! Every entry point returns an [`LgcfStatus`]; on failure the message is
//! available from [`lgcf_last_error`] on the same thread. Tensors cross the
//! boundary as row-major, channels-last `f64` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use logocaf::kv::KvMap;
use logocaf::model::{checkpoint, Model, ModelConfig};
use logocaf::tensor::Precision;
use logocaf::train::compute_metrics;
use logocaf::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LgcfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    ShapeMismatch = 4,
    Divisibility = 5,
    Io = 6,
    Format = 7,
    Numerical = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Opaque model handle; release with [`lgcf_model_free`].
pub struct LgcfModel {
    model: Model,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LgcfMetrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(LgcfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::ShapeMismatch { .. } => LgcfStatus::ShapeMismatch,
            Error::Divisibility(_) => LgcfStatus::Divisibility,
            Error::InvalidArgument(_) => LgcfStatus::InvalidArgument,
            Error::Config(_) => LgcfStatus::Config,
            Error::Numerical(_) => LgcfStatus::Numerical,
            Error::Format { .. } => LgcfStatus::Format,
            Error::Io { .. } => LgcfStatus::Io,
        };
        Fail(code, e.to_string())
    }
}

fn fail(code: LgcfStatus, msg: impl Into<String>) -> Fail {
    Fail(code, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LgcfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LgcfStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            LgcfStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(fail(LgcfStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn string_arg(p: *const c_char, what: &str) -> Result<String, Fail> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| fail(LgcfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const LgcfModel) -> Result<&'a Model, Fail> {
    non_null(m, "model")?;
    Ok(&(*m).model)
}

unsafe fn emit(out: *mut *mut LgcfModel, model: Model) -> Result<(), Fail> {
    non_null(out, "out")?;
    *out = Box::into_raw(Box::new(LgcfModel { model }));
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn lgcf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Crate version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lgcf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Build the small configuration used for synthetic scenes.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn lgcf_model_create_toy(
    hsi_bands: usize,
    x_bands: usize,
    classes: usize,
    seed: u64,
    out: *mut *mut LgcfModel,
) -> LgcfStatus {
    guard(|| {
        let mut cfg = ModelConfig::toy(hsi_bands, x_bands, classes);
        cfg.seed = seed;
        emit(out, Model::build(&cfg)?)
    })
}

/// Build from `key = value` model configuration text; missing keys take
/// their defaults and unknown keys are rejected.
///
/// # Safety
/// `config` must be a NUL-terminated string; `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn lgcf_model_from_config(config: *const c_char, out: *mut *mut LgcfModel) -> LgcfStatus {
    guard(|| {
        let text = string_arg(config, "config")?;
        let mut kv = KvMap::parse(&text)?;
        let cfg = ModelConfig::from_kv(&mut kv)?;
        kv.finish()?;
        emit(out, Model::build(&cfg)?)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn lgcf_model_load(path: *const c_char, out: *mut *mut LgcfModel) -> LgcfStatus {
    guard(|| {
        let path = PathBuf::from(string_arg(path, "path")?);
        emit(out, checkpoint::load(&path)?.model)
    })
}

/// Save with `f64` (or, when `single_precision` is set, `f32`) storage.
///
/// # Safety
/// `model` must come from this library; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lgcf_model_save(
    model: *const LgcfModel,
    path: *const c_char,
    single_precision: bool,
) -> LgcfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = PathBuf::from(string_arg(path, "path")?);
        let precision = if single_precision {
            Precision::F32
        } else {
            Precision::F64
        };
        checkpoint::save(&path, m, precision, None)?;
        Ok(())
    })
}

/// Trainable parameter count, HSI bands, X bands and classes; any output
/// pointer may be null.
///
/// # Safety
/// `model` must come from this library; non-null outputs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lgcf_model_info(
    model: *const LgcfModel,
    params: *mut usize,
    hsi_bands: *mut usize,
    x_bands: *mut usize,
    classes: *mut usize,
) -> LgcfStatus {
    guard(|| {
        let m = model_ref(model)?;
        for (p, v) in [
            (params, m.numel()),
            (hsi_bands, m.config.hsi_bands),
            (x_bands, m.config.x_bands),
            (classes, m.config.num_classes),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Logits for one `height×width` tile.
///
/// `hsi` holds `height·width·hsi_bands` values and `x` holds
/// `height·width·x_bands`; `logits` receives `height·width·classes` values
/// and `logits_len` is its capacity.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn lgcf_model_forward(
    model: *const LgcfModel,
    hsi: *const f64,
    x: *const f64,
    height: usize,
    width: usize,
    logits: *mut f64,
    logits_len: usize,
) -> LgcfStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(hsi, "hsi")?;
        non_null(x, "x")?;
        non_null(logits, "logits")?;
        let cfg = &m.config;
        let need = height * width * cfg.num_classes;
        if logits_len < need {
            return Err(fail(
                LgcfStatus::BufferTooSmall,
                format!("logits buffer holds {logits_len} values, {need} needed"),
            ));
        }
        let read = |p: *const f64, bands: usize| {
            let n = height * width * bands;
            Tensor::new(&[height, width, bands], std::slice::from_raw_parts(p, n).to_vec())
        };
        let y = m.predict(&read(hsi, cfg.hsi_bands)?, &read(x, cfg.x_bands)?)?;
        if !y.is_finite() {
            return Err(fail(LgcfStatus::Numerical, "non-finite logits"));
        }
        ptr::copy_nonoverlapping(y.data().as_ptr(), logits, need);
        Ok(())
    })
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `model` must be null or a live handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn lgcf_model_free(model: *mut LgcfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// OA, AA and kappa of `n` predicted against `n` reference labels; pixels
/// whose reference equals `ignore` are skipped.
///
/// # Safety
/// `pred` and `reference` must hold `n` values; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn lgcf_metrics(
    pred: *const i64,
    reference: *const i64,
    n: usize,
    classes: usize,
    ignore: i64,
    out: *mut LgcfMetrics,
) -> LgcfStatus {
    guard(|| {
        non_null(pred, "pred")?;
        non_null(reference, "reference")?;
        non_null(out, "out")?;
        let p = std::slice::from_raw_parts(pred, n);
        let r = std::slice::from_raw_parts(reference, n);
        let m = compute_metrics(p, r, classes, ignore)?;
        *out = LgcfMetrics {
            oa: m.oa,
            aa: m.aa,
            kappa: m.kappa,
        };
        Ok(())
    })
}
