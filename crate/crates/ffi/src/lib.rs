//! C ABI over trained dasnet checkpoints.
//!
//! Every function returns a [`DasnetStatus`]. On failure the message is
//! available from [`dasnet_last_error`] on the same thread. Handles are
//! opaque and released with their matching `_free` function; passing NULL
//! to a `_free` function is a no-op.
//!
//! Images are interleaved 8-bit RGB, row-major, `3·width·height` bytes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dasnet::decoder::semantic_infer;
use dasnet::harness::checkpoint::{load_checkpoint, Stage};
use dasnet::instance::instance_infer;
use dasnet::model::Model;
use dasnet::{BBox, Error, ParamStore, Tensor};

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DasnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Io = 5,
    /// Checkpoint was trained for a different stage than the call needs.
    WrongStage = 6,
    /// Index past the end of a result set.
    OutOfRange = 7,
    /// Caller buffer length differs from the required length.
    BufferSize = 8,
    /// Parameter missing from or unexpected in a checkpoint.
    Param = 9,
    Panic = 10,
}

/// Training stage recorded in a checkpoint.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DasnetStage {
    Detector = 0,
    Semantic = 1,
    Instance = 2,
}

impl From<Stage> for DasnetStage {
    fn from(s: Stage) -> Self {
        match s {
            Stage::Detector => DasnetStage::Detector,
            Stage::Semantic => DasnetStage::Semantic,
            Stage::Instance => DasnetStage::Instance,
        }
    }
}

/// One detection or instance. Coordinates are normalized to `[0, 1]`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DasnetInstance {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
    /// Class label, 1-based.
    pub label: u32,
    /// Detection score, times the mask score for instances.
    pub score: f32,
    /// Mask score; 1 for plain detections.
    pub instance_score: f32,
    /// Whether [`dasnet_result_mask`] has a mask for this entry.
    pub has_mask: bool,
}

/// A loaded checkpoint ready for inference.
pub struct DasnetModel {
    model: Model,
    params: ParamStore,
    stage: Stage,
}

/// Detections or instances of one image.
pub struct DasnetResult {
    width: usize,
    height: usize,
    items: Vec<(DasnetInstance, Option<Vec<bool>>)>,
}

#[derive(Debug)]
struct Failure(DasnetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Shape { .. } => DasnetStatus::Shape,
            Error::InvalidArgument(_) | Error::Dataset(_) => DasnetStatus::InvalidArgument,
            Error::MissingGrad(_) | Error::UnknownParam(_) => DasnetStatus::Param,
            Error::Format { .. } => DasnetStatus::Format,
            Error::Io { .. } => DasnetStatus::Io,
        };
        Failure(code, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, records its error message and turns panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DasnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            DasnetStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_last_error(&msg);
            code
        }
        Err(_) => {
            set_last_error("internal panic");
            DasnetStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DasnetStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Planar `1×3×H×W` tensor from interleaved RGB bytes.
unsafe fn image_tensor(rgb: *const u8, width: usize, height: usize) -> Result<Tensor, Failure> {
    if rgb.is_null() {
        return Err(null("rgb"));
    }
    if width == 0 || height == 0 {
        return Err(Failure(
            DasnetStatus::InvalidArgument,
            format!("image size {width}x{height} is empty"),
        ));
    }
    let plane = width * height;
    let bytes = std::slice::from_raw_parts(rgb, 3 * plane);
    let data = (0..3 * plane)
        .map(|j| bytes[3 * (j % plane) + j / plane] as f32 / 255.0)
        .collect();
    Ok(Tensor::new(vec![1, 3, height, width], data)?)
}

fn require_stage(m: &DasnetModel, want: Stage) -> Result<(), Failure> {
    if m.stage == want {
        Ok(())
    } else {
        Err(Failure(
            DasnetStatus::WrongStage,
            format!("checkpoint stage is {}, call needs {want}", m.stage),
        ))
    }
}

fn entry(b: &BBox, score: f32, instance_score: f32, has_mask: bool) -> DasnetInstance {
    DasnetInstance {
        x_min: b.x_min,
        y_min: b.y_min,
        x_max: b.x_max,
        y_max: b.y_max,
        label: b.label as u32,
        score,
        instance_score,
        has_mask,
    }
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the thread.
#[no_mangle]
pub extern "C" fn dasnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dasnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dasnet_model_load(
    path: *const c_char,
    out: *mut *mut DasnetModel,
) -> DasnetStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = std::ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(DasnetStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ckpt = load_checkpoint(Path::new(path))?;
        let model = Model::new(ckpt.meta.model.clone())?;
        *out = Box::into_raw(Box::new(DasnetModel {
            model,
            params: ckpt.params,
            stage: ckpt.meta.stage,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`dasnet_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dasnet_model_free(model: *mut DasnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of object classes, background excluded.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dasnet_model_classes(
    model: *const DasnetModel,
    out: *mut u32,
) -> DasnetStatus {
    guard(|| {
        let m = deref(model, "model")?;
        *deref_mut(out, "out")? = m.model.classes() as u32;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dasnet_model_stage(
    model: *const DasnetModel,
    out: *mut DasnetStage,
) -> DasnetStatus {
    guard(|| {
        let m = deref(model, "model")?;
        *deref_mut(out, "out")? = m.stage.into();
        Ok(())
    })
}

/// Replaces the detection score and NMS IoU thresholds. The model is left
/// unchanged when the values are rejected.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dasnet_model_set_thresholds(
    model: *mut DasnetModel,
    score_thresh: f32,
    nms_thresh: f32,
) -> DasnetStatus {
    guard(|| {
        let m = deref_mut(model, "model")?;
        let mut cfg = m.model.cfg.clone();
        cfg.detector.score_thresh = score_thresh;
        cfg.detector.nms_thresh = nms_thresh;
        m.model = Model::new(cfg)?;
        Ok(())
    })
}

/// Runs the detector on one image. Works with a checkpoint of any stage.
///
/// # Safety
/// `model` must be a live handle, `rgb` must hold `3·width·height` bytes and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dasnet_detect(
    model: *const DasnetModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    out: *mut *mut DasnetResult,
) -> DasnetStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = std::ptr::null_mut();
        let m = deref(model, "model")?;
        let image = image_tensor(rgb, width, height)?;
        let boxes = m.model.detector.detect(&m.params, &image)?;
        let items = boxes
            .iter()
            .map(|b| (entry(b, b.score.unwrap_or(0.0), 1.0, false), None))
            .collect();
        *out = Box::into_raw(Box::new(DasnetResult {
            width,
            height,
            items,
        }));
        Ok(())
    })
}

/// Per-pixel class labels (0 = background) of one image into `labels`,
/// which must hold exactly `width·height` bytes. Needs a semantic checkpoint.
///
/// # Safety
/// `model` must be a live handle, `rgb` must hold `3·width·height` bytes and
/// `labels` must be writable for `labels_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dasnet_segment_semantic(
    model: *const DasnetModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    labels: *mut u8,
    labels_len: usize,
) -> DasnetStatus {
    guard(|| {
        let m = deref(model, "model")?;
        require_stage(m, Stage::Semantic)?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        if labels_len != width * height {
            return Err(Failure(
                DasnetStatus::BufferSize,
                format!("labels holds {labels_len} bytes, need {}", width * height),
            ));
        }
        let image = image_tensor(rgb, width, height)?;
        let pred = semantic_infer(&m.model.detector, &m.model.decoder, &m.params, &image)?;
        std::slice::from_raw_parts_mut(labels, labels_len).copy_from_slice(&pred);
        Ok(())
    })
}

/// Instance masks of one image, sorted by descending score. Needs an
/// instance checkpoint.
///
/// # Safety
/// `model` must be a live handle, `rgb` must hold `3·width·height` bytes and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dasnet_segment_instances(
    model: *const DasnetModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    out: *mut *mut DasnetResult,
) -> DasnetStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = std::ptr::null_mut();
        let m = deref(model, "model")?;
        require_stage(m, Stage::Instance)?;
        let image = image_tensor(rgb, width, height)?;
        let preds = instance_infer(
            &m.model.detector,
            &m.model.decoder,
            &m.params,
            m.model.cfg.k,
            &image,
        )?;
        let items = preds
            .into_iter()
            .map(|p| {
                (
                    entry(&p.bbox, p.score, p.instance_score, true),
                    Some(p.mask),
                )
            })
            .collect();
        *out = Box::into_raw(Box::new(DasnetResult {
            width,
            height,
            items,
        }));
        Ok(())
    })
}

/// # Safety
/// `result` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dasnet_result_len(
    result: *const DasnetResult,
    out: *mut usize,
) -> DasnetStatus {
    guard(|| {
        let r = deref(result, "result")?;
        *deref_mut(out, "out")? = r.items.len();
        Ok(())
    })
}

fn item(r: &DasnetResult, index: usize) -> Result<&(DasnetInstance, Option<Vec<bool>>), Failure> {
    r.items.get(index).ok_or_else(|| {
        Failure(
            DasnetStatus::OutOfRange,
            format!("index {index} out of range for {} entries", r.items.len()),
        )
    })
}

/// # Safety
/// `result` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dasnet_result_get(
    result: *const DasnetResult,
    index: usize,
    out: *mut DasnetInstance,
) -> DasnetStatus {
    guard(|| {
        let r = deref(result, "result")?;
        *deref_mut(out, "out")? = item(r, index)?.0;
        Ok(())
    })
}

/// Writes the 0/1 mask of entry `index` into `mask`, which must hold exactly
/// `width·height` bytes of the segmented image.
///
/// # Safety
/// `result` must be a live handle and `mask` writable for `mask_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dasnet_result_mask(
    result: *const DasnetResult,
    index: usize,
    mask: *mut u8,
    mask_len: usize,
) -> DasnetStatus {
    guard(|| {
        let r = deref(result, "result")?;
        let bits = item(r, index)?.1.as_ref().ok_or_else(|| {
            Failure(
                DasnetStatus::InvalidArgument,
                format!("entry {index} is a detection without a mask"),
            )
        })?;
        if mask.is_null() {
            return Err(null("mask"));
        }
        let need = r.width * r.height;
        if mask_len != need {
            return Err(Failure(
                DasnetStatus::BufferSize,
                format!("mask holds {mask_len} bytes, need {need}"),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(mask, mask_len);
        for (d, &b) in dst.iter_mut().zip(bits) {
            *d = b as u8;
        }
        Ok(())
    })
}

/// # Safety
/// `result` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dasnet_result_free(result: *mut DasnetResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}
