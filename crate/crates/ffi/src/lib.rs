//! C ABI over the obstruction-removal pipeline.
//!
//! Images cross the boundary as interleaved RGB `double` buffers in `[0, 1]`
//! (`width * height * 3` values, row-major), masks as `width * height`
//! values. Every function returns a [`DobsStatus`]; on failure the message
//! is retrievable with [`dobs_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use deobstruct::evaluation::{psnr, ssim};
use deobstruct::imaging::{AlphaMask, SceneImage, TransparencyClass};
use deobstruct::model::ModelBundle;
use deobstruct::pipeline::infer;
use deobstruct::prompting::{classify_text, Instruction};
use deobstruct::training::Checkpoint;
use deobstruct::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DobsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Shape = 3,
    Validation = 4,
    Parameter = 5,
    Numeric = 6,
    Load = 7,
    Io = 8,
    Panic = 9,
}

impl From<&Error> for DobsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => DobsStatus::Shape,
            Error::Validation(_) => DobsStatus::Validation,
            Error::Parameter(_) => DobsStatus::Parameter,
            Error::Numeric(_) => DobsStatus::Numeric,
            Error::Load(_) => DobsStatus::Load,
            Error::Io { .. } => DobsStatus::Io,
        }
    }
}

/// Opaque handle to a loaded model.
pub struct DobsModel {
    inner: ModelBundle,
}

/// Masking decision for an instruction.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DobsSwitch {
    /// 1 when the instruction names a semi-transparent obstruction.
    pub semi_transparent: u8,
    pub sim_opaque: f64,
    pub sim_semi_transparent: f64,
    pub p_opaque: f64,
    pub p_semi_transparent: f64,
}

/// Summary of one removal call.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DobsTrace {
    pub decision: DobsSwitch,
    pub adapter_ran: u8,
    pub mask_mean: f64,
    pub mask_coverage: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
}

struct Failure(DobsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(DobsStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DobsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DobsStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| (*s).to_owned())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            DobsStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DobsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller passes a NUL-terminated string that outlives the call.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure(DobsStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `len` readable doubles at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `len` writable doubles at `p`.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn pixels(width: usize, height: usize, channels: usize) -> Result<usize, Failure> {
    width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Failure(DobsStatus::Shape, format!("{width}x{height} overflows")))
}

unsafe fn read_image(p: *const f64, width: usize, height: usize) -> Result<SceneImage, Failure> {
    let src = unsafe { slice(p, pixels(width, height, 3)?, "image") }?;
    let plane = width * height;
    let mut planar = vec![0.0; 3 * plane];
    for (i, px) in src.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * plane + i] = px[c];
        }
    }
    Ok(SceneImage::new(width, height, planar)?)
}

fn write_image(img: &SceneImage, dst: &mut [f64]) {
    let plane = img.width() * img.height();
    let data = img.data();
    for (i, px) in dst.chunks_exact_mut(3).enumerate() {
        for c in 0..3 {
            px[c] = data[c * plane + i];
        }
    }
}

fn switch_of(d: &deobstruct::prompting::SwitchDecision) -> DobsSwitch {
    DobsSwitch {
        semi_transparent: u8::from(d.class == TransparencyClass::SemiTransparent),
        sim_opaque: d.sim_opaque,
        sim_semi_transparent: d.sim_semi_transparent,
        p_opaque: d.p_opaque,
        p_semi_transparent: d.p_semi_transparent,
    }
}

/// Load a checkpoint. On success `*out` owns a handle to release with
/// [`dobs_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dobs_model_load(path: *const c_char, out: *mut *mut DobsModel) -> DobsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null above; caller guarantees writability.
        unsafe { *out = ptr::null_mut() };
        let path = unsafe { c_str(path, "path") }?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        let handle = Box::into_raw(Box::new(DobsModel { inner: ckpt.model }));
        unsafe { *out = handle };
        Ok(())
    })
}

/// Release a handle from [`dobs_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle not freed before.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dobs_model_free(model: *mut DobsModel) {
    if !model.is_null() {
        // SAFETY: the handle came from Box::into_raw in dobs_model_load.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Run the full pipeline. `mask` may be null (use the detector) or point
/// to `width * height` values overriding it. `trace` may be null.
///
/// # Safety
/// Buffers must hold the sizes documented at the crate level.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dobs_remove(
    model: *const DobsModel,
    image: *const f64,
    width: usize,
    height: usize,
    instruction: *const c_char,
    mask: *const f64,
    out_image: *mut f64,
    trace: *mut DobsTrace,
) -> DobsStatus {
    guard(|| {
        // SAFETY: caller passes a live handle or null.
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let img = unsafe { read_image(image, width, height) }?;
        let text = unsafe { c_str(instruction, "instruction") }?;
        let override_mask = if mask.is_null() {
            None
        } else {
            let m = unsafe { slice(mask, pixels(width, height, 1)?, "mask") }?;
            Some(AlphaMask::soft(width, height, m.to_vec())?)
        };
        let dst = unsafe { slice_mut(out_image, pixels(width, height, 3)?, "out_image") }?;
        let out = infer(&model.inner, &img, &Instruction::new(text)?, override_mask.as_ref())?;
        write_image(&out.image, dst);
        if !trace.is_null() {
            let t = &out.trace;
            let summary = DobsTrace {
                decision: DobsSwitch {
                    semi_transparent: u8::from(t.class == TransparencyClass::SemiTransparent),
                    sim_opaque: t.sim_opaque,
                    sim_semi_transparent: t.sim_semi_transparent,
                    p_opaque: t.p_opaque,
                    p_semi_transparent: t.p_semi_transparent,
                },
                adapter_ran: u8::from(t.adapter_ran),
                mask_mean: t.mask_mean,
                mask_coverage: t.mask_coverage,
            };
            // SAFETY: checked non-null; caller guarantees writability.
            unsafe { *trace = summary };
        }
        Ok(())
    })
}

/// Detector probabilities, `width * height` values written to `out_mask`.
///
/// # Safety
/// Buffers must hold the sizes documented at the crate level.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dobs_detect_mask(
    model: *const DobsModel,
    image: *const f64,
    width: usize,
    height: usize,
    out_mask: *mut f64,
) -> DobsStatus {
    guard(|| {
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let img = unsafe { read_image(image, width, height) }?;
        let dst = unsafe { slice_mut(out_mask, pixels(width, height, 1)?, "out_mask") }?;
        let mask = model.inner.detector.detect_mask(&img)?;
        dst.copy_from_slice(mask.data());
        Ok(())
    })
}

/// Transparency decision for an instruction.
///
/// # Safety
/// `instruction` must be NUL-terminated; `out` must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dobs_classify(
    model: *const DobsModel,
    instruction: *const c_char,
    out: *mut DobsSwitch,
) -> DobsStatus {
    guard(|| {
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let text = unsafe { c_str(instruction, "instruction") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let d = classify_text(text, &model.inner.encoders.text, &model.inner.config.switch)?;
        unsafe { *out = switch_of(&d) };
        Ok(())
    })
}

unsafe fn metric(
    f: fn(&SceneImage, &SceneImage) -> deobstruct::Result<f64>,
    reference: *const f64,
    test: *const f64,
    width: usize,
    height: usize,
    out: *mut f64,
) -> DobsStatus {
    guard(|| {
        let a = unsafe { read_image(reference, width, height) }?;
        let b = unsafe { read_image(test, width, height) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let v = f(&a, &b)?;
        unsafe { *out = v };
        Ok(())
    })
}

/// PSNR in dB, capped at 100 for identical images.
///
/// # Safety
/// Both images must hold `width * height * 3` doubles; `out` must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dobs_psnr(
    reference: *const f64,
    test: *const f64,
    width: usize,
    height: usize,
    out: *mut f64,
) -> DobsStatus {
    unsafe { metric(psnr, reference, test, width, height, out) }
}

/// Luminance SSIM with an 11x11 Gaussian window.
///
/// # Safety
/// Both images must hold `width * height * 3` doubles; `out` must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dobs_ssim(
    reference: *const f64,
    test: *const f64,
    width: usize,
    height: usize,
    out: *mut f64,
) -> DobsStatus {
    unsafe { metric(ssim, reference, test, width, height, out) }
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated)
/// and return its length in bytes, excluding the terminator. With a null or
/// too small buffer nothing is copied; the return value is still the length
/// needed, so callers can size a buffer and call again.
///
/// # Safety
/// `buf` must be null or writable for `len` bytes.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dobs_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let n = msg.len();
        if !buf.is_null() && len > n {
            // SAFETY: `len > n` bytes are writable at `buf`.
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        n
    })
}

/// Library version as a static NUL-terminated string.
#[unsafe(no_mangle)]
pub extern "C" fn dobs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
