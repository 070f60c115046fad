//! C ABI over `deqdet`.
//!
//! Every function returns a [`DeqdetStatus`]; on failure the message is kept
//! per thread and read back with [`deqdet_last_error`]. Handles are opaque
//! and owned by the caller, who releases them with the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use deqdet::decoder::{load_checkpoint, save_checkpoint, Decoder};
use deqdet::synth::{generate_dataset, generate_scene};
use deqdet::trainer::{detections, eval_spec, evaluate, infer, renderer, TrainConfig, Trainer};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeqdetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Train = 5,
    OutOfRange = 6,
    Panic = 7,
}

/// One detection in pixel corner form.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DeqdetDetection {
    pub class_index: u32,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Training configuration.
pub struct DeqdetConfig {
    cfg: TrainConfig,
}

/// A decoder together with the configuration it was built from.
pub struct DeqdetModel {
    cfg: TrainConfig,
    decoder: Decoder,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

type FfiResult<T> = Result<T, (DeqdetStatus, String)>;

fn fail<T>(status: DeqdetStatus, msg: impl ToString) -> FfiResult<T> {
    Err((status, msg.to_string()))
}

/// Runs `body`, converting errors and panics into a status.
fn guard(body: impl FnOnce() -> FfiResult<()>) -> DeqdetStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => DeqdetStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            DeqdetStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(DeqdetStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (DeqdetStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| (DeqdetStatus::NullPointer, format!("{what} is null")))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| (DeqdetStatus::NullPointer, format!("{what} is null")))
}

fn config_err(e: impl ToString) -> (DeqdetStatus, String) {
    (DeqdetStatus::Config, e.to_string())
}

fn train_err(e: impl ToString) -> (DeqdetStatus, String) {
    (DeqdetStatus::Train, e.to_string())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn deqdet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn deqdet_config_new(out: *mut *mut DeqdetConfig) -> DeqdetStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        *out = Box::into_raw(Box::new(DeqdetConfig { cfg: TrainConfig::default() }));
        Ok(())
    })
}

/// Parses `key = value` lines on top of the defaults.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn deqdet_config_from_text(text: *const c_char, out: *mut *mut DeqdetConfig) -> DeqdetStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let out = mut_arg(out, "out")?;
        let cfg = TrainConfig::from_text(text).map_err(config_err)?;
        *out = Box::into_raw(Box::new(DeqdetConfig { cfg }));
        Ok(())
    })
}

/// Sets one key. The config is unchanged on failure.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn deqdet_config_set(
    cfg: *mut DeqdetConfig,
    key: *const c_char,
    value: *const c_char,
) -> DeqdetStatus {
    guard(|| {
        let cfg = mut_arg(cfg, "cfg")?;
        let key = str_arg(key, "key")?;
        let value = str_arg(value, "value")?;
        let mut next = cfg.cfg.clone();
        next.set(key, value).map_err(config_err)?;
        cfg.cfg = next;
        Ok(())
    })
}

/// Writes the config as text into `buf`. `needed` receives the length
/// including the terminating NUL; a short buffer yields `OutOfRange`.
///
/// # Safety
/// `buf` must hold `len` bytes (or be null with `len` 0).
#[no_mangle]
pub unsafe extern "C" fn deqdet_config_to_text(
    cfg: *const DeqdetConfig,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> DeqdetStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let text = CString::new(cfg.cfg.to_text()).map_err(config_err)?;
        let bytes = text.as_bytes_with_nul();
        if !needed.is_null() {
            *needed = bytes.len();
        }
        if bytes.len() > len || buf.is_null() {
            return fail(DeqdetStatus::OutOfRange, format!("buffer of {len} bytes, {} needed", bytes.len()));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, bytes.len());
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn deqdet_config_free(cfg: *mut DeqdetConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Freshly initialized model for `cfg`.
///
/// # Safety
/// `cfg` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn deqdet_model_new(cfg: *const DeqdetConfig, out: *mut *mut DeqdetModel) -> DeqdetStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?.cfg.clone();
        let out = mut_arg(out, "out")?;
        cfg.validate().map_err(config_err)?;
        let decoder = Decoder::new(cfg.decoder_config(), cfg.seed).map_err(config_err)?;
        *out = Box::into_raw(Box::new(DeqdetModel { cfg, decoder }));
        Ok(())
    })
}

/// Trains with `cfg` and returns the trained model and its held-out AP.
///
/// # Safety
/// `cfg` must come from this library; `out` must be valid; `ap50` and `ap`
/// may be null.
#[no_mangle]
pub unsafe extern "C" fn deqdet_train(
    cfg: *const DeqdetConfig,
    out: *mut *mut DeqdetModel,
    ap50: *mut f64,
    ap: *mut f64,
) -> DeqdetStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?.cfg.clone();
        let out = mut_arg(out, "out")?;
        let mut trainer = Trainer::new(cfg.clone()).map_err(train_err)?;
        let summary = trainer.run(|_| {}).map_err(train_err)?;
        if !ap50.is_null() {
            *ap50 = summary.eval.ap.ap50;
        }
        if !ap.is_null() {
            *ap = summary.eval.ap.ap;
        }
        *out = Box::into_raw(Box::new(DeqdetModel { cfg, decoder: trainer.decoder }));
        Ok(())
    })
}

/// Loads a checkpoint written by [`deqdet_model_save`] or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn deqdet_model_load(path: *const c_char, out: *mut *mut DeqdetModel) -> DeqdetStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = mut_arg(out, "out")?;
        let ck = load_checkpoint(Path::new(path)).map_err(|e| (DeqdetStatus::Io, e.to_string()))?;
        let cfg = TrainConfig::from_text(&ck.config).map_err(config_err)?;
        let mut decoder = Decoder::new(cfg.decoder_config(), cfg.seed).map_err(config_err)?;
        decoder.load_tensors(&ck.tensors).map_err(|e| (DeqdetStatus::Io, e.to_string()))?;
        *out = Box::into_raw(Box::new(DeqdetModel { cfg, decoder }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn deqdet_model_save(model: *const DeqdetModel, path: *const c_char) -> DeqdetStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let path = str_arg(path, "path")?;
        save_checkpoint(Path::new(path), &model.decoder, &model.cfg.to_text())
            .map_err(|e| (DeqdetStatus::Io, e.to_string()))
    })
}

/// Total scalar parameter count.
///
/// # Safety
/// `model` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn deqdet_model_num_params(model: *const DeqdetModel, out: *mut usize) -> DeqdetStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        *mut_arg(out, "out")? = model.decoder.params().numel();
        Ok(())
    })
}

/// AP@0.5 and AP@[0.5:0.95] on the first `num_scenes` held-out scenes
/// (0 means the configured count).
///
/// # Safety
/// `model` must come from this library; `ap50` and `ap` must be valid.
#[no_mangle]
pub unsafe extern "C" fn deqdet_model_evaluate(
    model: *const DeqdetModel,
    num_scenes: usize,
    ap50: *mut f64,
    ap: *mut f64,
) -> DeqdetStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let ap50 = mut_arg(ap50, "ap50")?;
        let ap = mut_arg(ap, "ap")?;
        let mut spec = eval_spec(&model.cfg);
        if num_scenes > 0 {
            spec.num_scenes = num_scenes;
        }
        let dataset = generate_dataset(&spec).map_err(train_err)?;
        let e = evaluate(&model.decoder, &model.cfg, &dataset).map_err(train_err)?;
        *ap50 = e.ap.ap50;
        *ap = e.ap.ap;
        Ok(())
    })
}

/// Detections above the score threshold on held-out scene `scene`.
/// `count` receives the total; at most `capacity` are written to `buf`.
///
/// # Safety
/// `model` must come from this library; `buf` must hold `capacity` entries
/// (or be null with `capacity` 0); `count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn deqdet_model_detect(
    model: *const DeqdetModel,
    scene: usize,
    buf: *mut DeqdetDetection,
    capacity: usize,
    count: *mut usize,
) -> DeqdetStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let count = mut_arg(count, "count")?;
        let spec = eval_spec(&model.cfg);
        if scene >= spec.num_scenes {
            return fail(DeqdetStatus::OutOfRange, format!("scene {scene} of {}", spec.num_scenes));
        }
        if buf.is_null() && capacity > 0 {
            return fail(DeqdetStatus::NullPointer, "buf is null");
        }
        let x = renderer(&model.cfg).render(&generate_scene(&spec, scene));
        let (y, _) = infer(&model.decoder, &model.cfg, &x).map_err(train_err)?;
        let dets = detections(&model.decoder, &y, 0).map_err(train_err)?;
        *count = dets.len();
        for (i, d) in dets.iter().take(capacity).enumerate() {
            *buf.add(i) = DeqdetDetection {
                class_index: d.class as u32,
                score: d.score,
                x1: d.bbox.x1,
                y1: d.bbox.y1,
                x2: d.bbox.x2,
                y2: d.bbox.y2,
            };
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn deqdet_model_free(model: *mut DeqdetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
