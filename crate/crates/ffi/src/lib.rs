//! C ABI over the `comuni` library.
//!
//! Models are opaque handles created by `*_load` and released by `*_free`. Every
//! fallible call returns a [`ComuniStatus`]; on failure a message is kept per thread
//! and can be read with [`comuni_last_error`]. Clips are passed as contiguous
//! `frames × height × width × 3` float buffers with values in [0, 1].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use comuni::checkpoint::{Checkpoint, LDM_KIND, VAE_KIND};
use comuni::clip::VideoClip;
use comuni::generation::{sample_video, Sampler, Strategy};
use comuni::ldm::LdmModel;
use comuni::metrics;
use comuni::vae::VaeModel;
use comuni::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComuniStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Format = 3,
    Range = 4,
    Shape = 5,
    Config = 6,
    Domain = 7,
    Compatibility = 8,
    NoOp = 9,
    TrainingDivergence = 10,
    SamplingDivergence = 11,
    Io = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

impl From<&Error> for ComuniStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Format(_) => ComuniStatus::Format,
            Error::Range(_) => ComuniStatus::Range,
            Error::Shape(_) => ComuniStatus::Shape,
            Error::Config(_) => ComuniStatus::Config,
            Error::Domain(_) => ComuniStatus::Domain,
            Error::Compatibility(_) => ComuniStatus::Compatibility,
            Error::NoOp(_) => ComuniStatus::NoOp,
            Error::TrainingDivergence { .. } => ComuniStatus::TrainingDivergence,
            Error::SamplingDivergence { .. } => ComuniStatus::SamplingDivergence,
            Error::Io { .. } => ComuniStatus::Io,
        }
    }
}

/// Trained autoencoder.
pub struct ComuniVae {
    model: VaeModel,
}

/// Trained denoiser bound to the autoencoder it was trained on.
pub struct ComuniLdm {
    model: LdmModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Fail(ComuniStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

type Outcome = Result<(), Fail>;

/// Runs `f`, records any failure and converts panics into [`ComuniStatus::Panic`].
fn guard(f: impl FnOnce() -> Outcome) -> ComuniStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ComuniStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ComuniStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(ComuniStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail(ComuniStatus::InvalidUtf8, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice<'a>(p: *const f32, len: usize, what: &str) -> Result<&'a [f32], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out(out: *mut f32, out_len: usize, data: &[f32]) -> Outcome {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if out_len < data.len() {
        return Err(Fail(ComuniStatus::BufferTooSmall, format!("output holds {out_len} values, {} needed", data.len())));
    }
    std::ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    Ok(())
}

fn clip_of(vae: &VaeModel, data: &[f32]) -> Result<VideoClip, Fail> {
    let c = vae.cfg();
    Ok(VideoClip::new([c.frames, c.resolution, c.resolution, 3], data.to_vec())?)
}

/// Message of the last failed call on this thread ("" after a success). Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn comuni_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn comuni_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an autoencoder checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn comuni_vae_load(path: *const c_char, out: *mut *mut ComuniVae) -> ComuniStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(&path_arg(path)?)?;
        ckpt.expect_kind(VAE_KIND)?;
        let model = VaeModel::from_checkpoint(&ckpt)?;
        *out = Box::into_raw(Box::new(ComuniVae { model }));
        Ok(())
    })
}

/// # Safety
/// `vae` must come from [`comuni_vae_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn comuni_vae_free(vae: *mut ComuniVae) {
    if !vae.is_null() {
        drop(Box::from_raw(vae));
    }
}

/// Clip layout the autoencoder expects: `dims = [frames, height, width, 3]`.
///
/// # Safety
/// `vae` must be a live handle and `dims` point to 4 writable values.
#[no_mangle]
pub unsafe extern "C" fn comuni_vae_clip_dims(vae: *const ComuniVae, dims: *mut usize) -> ComuniStatus {
    guard(|| {
        let vae = vae.as_ref().ok_or_else(|| null("vae"))?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        let c = vae.model.cfg();
        std::ptr::copy_nonoverlapping([c.frames, c.resolution, c.resolution, 3].as_ptr(), dims, 4);
        Ok(())
    })
}

/// Encodes and decodes one clip.
///
/// # Safety
/// `clip` must hold `len` values and `out` have room for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn comuni_vae_reconstruct(
    vae: *const ComuniVae,
    clip: *const f32,
    len: usize,
    out: *mut f32,
    out_len: usize,
) -> ComuniStatus {
    guard(|| {
        let vae = vae.as_ref().ok_or_else(|| null("vae"))?;
        let clip = clip_of(&vae.model, slice(clip, len, "clip")?)?;
        write_out(out, out_len, &vae.model.reconstruct(&clip)?.data)
    })
}

/// Decodes the common latent of `common_from` with the unique latents of `unique_from`.
///
/// # Safety
/// Both inputs must hold `len` values and `out` have room for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn comuni_vae_swap(
    vae: *const ComuniVae,
    common_from: *const f32,
    unique_from: *const f32,
    len: usize,
    out: *mut f32,
    out_len: usize,
) -> ComuniStatus {
    guard(|| {
        let vae = vae.as_ref().ok_or_else(|| null("vae"))?;
        let a = clip_of(&vae.model, slice(common_from, len, "common_from")?)?;
        let b = clip_of(&vae.model, slice(unique_from, len, "unique_from")?)?;
        write_out(out, out_len, &vae.model.swap_recompose(&a, &b)?.data)
    })
}

/// Loads a denoiser checkpoint, checking it was trained on `vae`'s latents. `use_ema`
/// selects the moving-average weights.
///
/// # Safety
/// `path` must be NUL-terminated, `vae` live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn comuni_ldm_load(
    path: *const c_char,
    vae: *const ComuniVae,
    use_ema: bool,
    out: *mut *mut ComuniLdm,
) -> ComuniStatus {
    guard(|| {
        let vae = vae.as_ref().ok_or_else(|| null("vae"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(&path_arg(path)?)?;
        ckpt.expect_kind(LDM_KIND)?;
        LdmModel::check_vae(&ckpt, &vae.model)?;
        let model = LdmModel::from_checkpoint(&ckpt, use_ema)?;
        *out = Box::into_raw(Box::new(ComuniLdm { model }));
        Ok(())
    })
}

/// # Safety
/// `ldm` must come from [`comuni_ldm_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn comuni_ldm_free(ldm: *mut ComuniLdm) {
    if !ldm.is_null() {
        drop(Box::from_raw(ldm));
    }
}

/// Samples `frames` frames (extending past the clip length with `strategy` 1–6) and
/// decodes them into `out`, which needs `frames × height × width × 3` values.
///
/// # Safety
/// Handles must be live and `out` have room for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn comuni_sample(
    ldm: *const ComuniLdm,
    vae: *const ComuniVae,
    strategy: u8,
    frames: usize,
    stride: usize,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> ComuniStatus {
    guard(|| {
        let ldm = ldm.as_ref().ok_or_else(|| null("ldm"))?;
        let vae = vae.as_ref().ok_or_else(|| null("vae"))?;
        let sampler = Sampler::new(ldm.model.cfg(), stride)?;
        let (latents, _) = sample_video(&ldm.model, &sampler, frames, Strategy::new(strategy)?, seed)?;
        write_out(out, out_len, &vae.model.decode(&latents)?.data)
    })
}

/// PSNR in dB between two equally long buffers (99 for identical inputs).
///
/// # Safety
/// `a` and `b` must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn comuni_psnr(a: *const f32, b: *const f32, len: usize, out: *mut f64) -> ComuniStatus {
    guard(|| {
        let v = metrics::psnr(slice(a, len, "a")?, slice(b, len, "b")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// SSIM between two `height × width × channels` frames.
///
/// # Safety
/// `a` and `b` must hold `height × width × channels` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn comuni_ssim(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut f64,
) -> ComuniStatus {
    guard(|| {
        let n = height * width * channels;
        let v = metrics::ssim(slice(a, n, "a")?, slice(b, n, "b")?, height, width, channels)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}
