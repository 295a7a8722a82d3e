//! C ABI over `despoof-core`.
//!
//! Conventions:
//! - Every fallible function returns a [`DspStatus`]; on failure a message is
//!   available from [`dsp_last_error`] on the same thread.
//! - Models are opaque handles created by `*_load` and released by `*_free`.
//! - Images are `float` planes in `[C,H,W]` order with values in `[-1, 1]`.
//! - Labels are `1` for genuine and `0` for spoof.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use despoof_core::corpus::{Label, DEPTH_SIZE};
use despoof_core::denoiser::{DenoiserParams, DomainTag};
use despoof_core::detector::DetectorParams;
use despoof_core::diffusion::despoof;
use despoof_core::metrics::{eer, MetricsReport, ScoreSet};
use despoof_core::numerics::Tensor;
use despoof_core::schedule::NoiseSchedule;
use despoof_core::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DspStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    Config = 6,
    Panic = 7,
}

/// Which data a denoiser was trained on.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DspDomainTag {
    SpoofUnion = 0,
    GenuineOnly = 1,
}

/// Metrics at a threshold fixed on development scores.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DspMetrics {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub eer: f64,
    pub hter: f64,
    pub threshold: f64,
}

/// Trained denoiser with the schedule it was trained under.
pub struct DspDenoiser {
    params: DenoiserParams<f32>,
    schedule: NoiseSchedule,
}

/// Trained detector.
pub struct DspDetector {
    params: DetectorParams<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DspStatus {
    match e {
        Error::InvalidArgument(_) => DspStatus::InvalidArgument,
        Error::Numeric(_) => DspStatus::Numeric,
        Error::Format(_) => DspStatus::Format,
        Error::Config(_) => DspStatus::Config,
        Error::Io(_) => DspStatus::Io,
    }
}

struct Fail(DspStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DspStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DspStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DspStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DspStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, Fail> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Fail(DspStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(Path::new(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn image_arg(p: *const f32, channels: usize, height: usize, width: usize, what: &str) -> Result<Tensor<f32>, Fail> {
    let len = channels
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Fail(DspStatus::InvalidArgument, "image dimensions overflow".into()))?;
    let data = slice_arg(p, len, what)?;
    Ok(Tensor::new(&[channels, height, width], data.to_vec())?)
}

unsafe fn labels_arg(p: *const u8, len: usize) -> Result<Vec<Label>, Fail> {
    slice_arg(p, len, "labels")?
        .iter()
        .map(|l| match l {
            1 => Ok(Label::Genuine),
            0 => Ok(Label::Spoof),
            v => Err(Fail(DspStatus::InvalidArgument, format!("label {v} is neither 0 nor 1"))),
        })
        .collect()
}

unsafe fn score_set_arg(scores: *const f64, labels: *const u8, len: usize) -> Result<ScoreSet, Fail> {
    let s = slice_arg(scores, len, "scores")?.to_vec();
    Ok(ScoreSet::new(s, labels_arg(labels, len)?)?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dsp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn dsp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a denoiser checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsp_denoiser_load(path: *const c_char, out: *mut *mut DspDenoiser) -> DspStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let (params, schedule) = DenoiserParams::<f32>::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DspDenoiser { params, schedule }));
        Ok(())
    })
}

/// Domain tag stored in a denoiser checkpoint.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsp_denoiser_domain_tag(model: *const DspDenoiser, out: *mut DspDomainTag) -> DspStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = match m.params.domain_tag {
            DomainTag::SpoofUnion => DspDomainTag::SpoofUnion,
            DomainTag::GenuineOnly => DspDomainTag::GenuineOnly,
        };
        Ok(())
    })
}

/// Releases a denoiser handle; null is ignored.
///
/// # Safety
/// `model` must come from [`dsp_denoiser_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dsp_denoiser_free(model: *mut DspDenoiser) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// De-spoofs one `[channels,height,width]` image through the spoof-union and
/// genuine-only models. Writes the noise map (same size as the image) and its
/// mean energy; `out_reconstruction` and `out_energy` may be null.
///
/// # Safety
/// Handles must be live; `image`, `out_noise` and a non-null
/// `out_reconstruction` must each hold `channels*height*width` floats.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn dsp_despoof(
    spoof: *const DspDenoiser,
    genuine: *const DspDenoiser,
    image: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    steps: usize,
    out_reconstruction: *mut f32,
    out_noise: *mut f32,
    out_energy: *mut f64,
) -> DspStatus {
    guard(|| {
        let s = spoof.as_ref().ok_or_else(|| null("spoof"))?;
        let g = genuine.as_ref().ok_or_else(|| null("genuine"))?;
        if out_noise.is_null() {
            return Err(null("out_noise"));
        }
        if s.schedule != g.schedule {
            return Err(Fail(DspStatus::InvalidArgument, "models were trained under different schedules".into()));
        }
        let x = image_arg(image, channels, height, width, "image")?;
        let (x_g, noise) = despoof(&x, &s.params, &g.params, &s.schedule, steps)?;
        ptr::copy_nonoverlapping(noise.map().data().as_ptr(), out_noise, x.numel());
        if !out_reconstruction.is_null() {
            ptr::copy_nonoverlapping(x_g.data().as_ptr(), out_reconstruction, x.numel());
        }
        if let Some(e) = out_energy.as_mut() {
            *e = noise.energy();
        }
        Ok(())
    })
}

/// Loads a detector checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsp_detector_load(path: *const c_char, out: *mut *mut DspDetector) -> DspStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let params = DetectorParams::<f32>::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DspDetector { params }));
        Ok(())
    })
}

/// Whether the detector consumes a noise map (1) or not (0).
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsp_detector_needs_noise(model: *const DspDetector, out: *mut u8) -> DspStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.params.config.inputs.needs_noise() as u8;
        Ok(())
    })
}

/// Releases a detector handle; null is ignored.
///
/// # Safety
/// `model` must come from [`dsp_detector_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dsp_detector_free(model: *mut DspDetector) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Liveness score of one `[3,size,size]` image, higher meaning more genuine.
/// `noise` is required when the detector consumes noise and ignored
/// otherwise. With `fuse` nonzero the score is the mean of the two per-stream
/// heads. `out_depth` may be null or hold the 32x32 predicted depth map.
///
/// # Safety
/// The handle must be live and every non-null buffer correctly sized.
#[no_mangle]
pub unsafe extern "C" fn dsp_detector_score(
    model: *const DspDetector,
    rgb: *const f32,
    noise: *const f32,
    size: usize,
    fuse: u8,
    out_score: *mut f64,
    out_depth: *mut f32,
) -> DspStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let score = out_score.as_mut().ok_or_else(|| null("out_score"))?;
        let x = image_arg(rgb, 3, size, size, "rgb")?.unsqueeze0();
        let n = if m.params.config.inputs.needs_noise() {
            Some(image_arg(noise, 3, size, size, "noise")?.unsqueeze0())
        } else {
            None
        };
        let p = m.params.predict(&x, n.as_ref())?;
        *score = if fuse != 0 { p.fused_scores()?[0] } else { p.scores()[0] };
        if !out_depth.is_null() {
            ptr::copy_nonoverlapping(p.depth[0].map().data().as_ptr(), out_depth, DEPTH_SIZE * DEPTH_SIZE);
        }
        Ok(())
    })
}

/// Equal error rate of a labelled score set and the threshold reaching it.
///
/// # Safety
/// `scores` and `labels` must hold `len` elements; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn dsp_eer(
    scores: *const f64,
    labels: *const u8,
    len: usize,
    out_eer: *mut f64,
    out_threshold: *mut f64,
) -> DspStatus {
    guard(|| {
        let set = score_set_arg(scores, labels, len)?;
        let (e, t) = eer(&set)?;
        *out_eer.as_mut().ok_or_else(|| null("out_eer"))? = e;
        if let Some(o) = out_threshold.as_mut() {
            *o = t;
        }
        Ok(())
    })
}

/// Full report on the test scores at the threshold where the development
/// scores reach their equal error rate. With `dev_len` zero the test set
/// fixes its own threshold.
///
/// # Safety
/// Each score/label pair must hold its stated number of elements.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn dsp_metrics(
    dev_scores: *const f64,
    dev_labels: *const u8,
    dev_len: usize,
    test_scores: *const f64,
    test_labels: *const u8,
    test_len: usize,
    out: *mut DspMetrics,
) -> DspStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let dev = if dev_len == 0 { None } else { Some(score_set_arg(dev_scores, dev_labels, dev_len)?) };
        let test = score_set_arg(test_scores, test_labels, test_len)?;
        let r = MetricsReport::evaluate(dev.as_ref(), &test)?;
        *out = DspMetrics {
            apcer: r.apcer,
            bpcer: r.bpcer,
            acer: r.acer,
            eer: r.eer,
            hter: r.hter,
            threshold: r.threshold,
        };
        Ok(())
    })
}
