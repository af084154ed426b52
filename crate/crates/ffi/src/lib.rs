//! C interface to the codec.
//!
//! Every function returns a [`ManfStatus`]. On failure a description of the
//! error is available from [`manf_last_error`] on the same thread until the
//! next call. Objects handed out by the library are released with the
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use manf::codec::{lambda_for_index, Codec, MaskMode};
use manf::eval::{bd_rate, ms_ssim, psnr_rgb, Quality, RdCurve, RdPoint};
use manf::flow::{FlowConfig, ModelKind};
use manf::image_io::{from_rgb8, to_rgb8};
use manf::mask::DEFAULT_VARIANCE_THRESHOLD;
use manf::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Malformed = 4,
    Truncated = 5,
    Checksum = 6,
    Version = 7,
    Checkpoint = 8,
    Internal = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManfModelKind {
    MAnfic = 0,
    MsAnfic = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManfMaskMode {
    Variance = 0,
    Rdo = 1,
    Fine = 2,
    Coarse = 3,
}

/// Opaque codec handle.
pub struct ManfCodec {
    inner: Codec,
}

/// Byte buffer owned by the library.
#[repr(C)]
pub struct ManfBuffer {
    pub data: *mut u8,
    pub len: usize,
}

/// Interleaved 8-bit RGB image owned by the library.
#[repr(C)]
pub struct ManfImage {
    pub data: *mut u8,
    pub width: usize,
    pub height: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct ManfEncodeStats {
    pub bpp: f64,
    pub estimated_bits: f64,
    pub psnr_rgb_db: f64,
    pub level1_fraction: f64,
}

/// Lambda index reported by [`manf_codec_lambda_index`] for checkpoints without one.
pub const MANF_NO_LAMBDA: i32 = -1;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> ManfStatus {
    match e {
        Error::Shape(_) | Error::InvalidArgument(_) | Error::Mask(_) | Error::NonFinite(_) => {
            ManfStatus::InvalidArgument
        }
        Error::Format(_) => ManfStatus::Malformed,
        Error::Truncated(_) => ManfStatus::Truncated,
        Error::Version { .. } => ManfStatus::Version,
        Error::Checksum { .. } => ManfStatus::Checksum,
        Error::Checkpoint(_) => ManfStatus::Checkpoint,
        Error::Io(_) => ManfStatus::Io,
    }
}

struct Fail(ManfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ManfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Fail {
    Fail(ManfStatus::InvalidArgument, message.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ManfStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ManfStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ManfStatus::Internal
        }
    }
}

unsafe fn slice<'a>(data: *const u8, len: usize, what: &str) -> Result<&'a [u8], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn codec_ref<'a>(codec: *const ManfCodec) -> Result<&'a Codec, Fail> {
    codec.as_ref().map(|c| &c.inner).ok_or_else(|| null("codec"))
}

fn rgb_len(width: usize, height: usize) -> Result<usize, Fail> {
    width.checked_mul(height).and_then(|n| n.checked_mul(3)).ok_or_else(|| invalid("image extents overflow"))
}

unsafe fn image_arg(rgb: *const u8, width: usize, height: usize) -> Result<manf::tensor::Tensor<f32>, Fail> {
    let bytes = slice(rgb, rgb_len(width, height)?, "rgb")?;
    Ok(from_rgb8(width, height, bytes)?)
}

fn into_raw(mut v: Vec<u8>) -> (*mut u8, usize) {
    v.shrink_to_fit();
    let len = v.len();
    let p = Box::into_raw(v.into_boxed_slice()) as *mut u8;
    (p, len)
}

unsafe fn free_raw(data: *mut u8, len: usize) {
    if !data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(data, len)));
    }
}

fn lambda_arg(codec: &Codec, lambda_index: i32) -> Result<u8, Fail> {
    if lambda_index < 0 {
        return codec.lambda_index.ok_or_else(|| invalid("checkpoint stores no lambda index; pass one explicitly"));
    }
    let l = u8::try_from(lambda_index).map_err(|_| invalid(format!("lambda index {lambda_index} out of range")))?;
    lambda_for_index(l)?;
    if let Some(c) = codec.lambda_index.filter(|&c| c != l) {
        return Err(Fail(ManfStatus::Checkpoint, format!("checkpoint was trained for lambda index {c}, not {l}")));
    }
    Ok(l)
}

/// Description of the last failure on this thread, or an empty string.
/// The pointer stays valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn manf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a codec from checkpoint bytes.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn manf_codec_from_checkpoint(
    data: *const u8,
    len: usize,
    out: *mut *mut ManfCodec,
) -> ManfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let codec = Codec::from_checkpoint_bytes(slice(data, len, "data")?)?;
        *out = Box::into_raw(Box::new(ManfCodec { inner: codec }));
        Ok(())
    })
}

/// Loads a codec from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn manf_codec_open(path: *const c_char, out: *mut *mut ManfCodec) -> ManfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let bytes = std::fs::read(path).map_err(|e| Fail(ManfStatus::Io, format!("{path}: {e}")))?;
        let codec = Codec::from_checkpoint_bytes(&bytes)?;
        *out = Box::into_raw(Box::new(ManfCodec { inner: codec }));
        Ok(())
    })
}

/// Freshly initialized, untrained codec. `lambda_index` may be
/// [`MANF_NO_LAMBDA`].
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn manf_codec_new(
    kind: ManfModelKind,
    transform_channels: usize,
    latent_channels: usize,
    seed: u64,
    lambda_index: i32,
    out: *mut *mut ManfCodec,
) -> ManfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let kind = match kind {
            ManfModelKind::MAnfic => ModelKind::MAnfic,
            ManfModelKind::MsAnfic => ModelKind::MsAnfic,
        };
        let lambda = if lambda_index >= 0 {
            let l =
                u8::try_from(lambda_index).map_err(|_| invalid(format!("lambda index {lambda_index} out of range")))?;
            lambda_for_index(l)?;
            Some(l)
        } else {
            None
        };
        let fresh = Codec::new(FlowConfig::new(kind, transform_channels, latent_channels)?, seed)?;
        let codec = Codec::from_parts(fresh.config, fresh.store, fresh.model, lambda)?;
        *out = Box::into_raw(Box::new(ManfCodec { inner: codec }));
        Ok(())
    })
}

/// Serialized checkpoint of `codec`, released with [`manf_buffer_free`].
///
/// # Safety
/// `codec` must come from this library and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn manf_codec_checkpoint(codec: *const ManfCodec, out: *mut ManfBuffer) -> ManfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ManfBuffer { data: ptr::null_mut(), len: 0 };
        let (data, len) = into_raw(codec_ref(codec)?.checkpoint_bytes()?);
        *out = ManfBuffer { data, len };
        Ok(())
    })
}

/// # Safety
/// `codec` must come from this library and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn manf_codec_lambda_index(codec: *const ManfCodec, out: *mut i32) -> ManfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = codec_ref(codec)?.lambda_index.map_or(MANF_NO_LAMBDA, i32::from);
        Ok(())
    })
}

/// # Safety
/// `codec` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn manf_codec_free(codec: *mut ManfCodec) {
    if !codec.is_null() {
        drop(Box::from_raw(codec));
    }
}

/// Compresses a `width` × `height` interleaved RGB image. A negative
/// `lambda_index` uses the one stored in the checkpoint. `stats` may be null.
///
/// # Safety
/// `rgb` must hold `3 · width · height` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn manf_encode_rgb8(
    codec: *const ManfCodec,
    rgb: *const u8,
    width: usize,
    height: usize,
    lambda_index: i32,
    mask: ManfMaskMode,
    out: *mut ManfBuffer,
    stats: *mut ManfEncodeStats,
) -> ManfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ManfBuffer { data: ptr::null_mut(), len: 0 };
        let codec = codec_ref(codec)?;
        let image = image_arg(rgb, width, height)?;
        let index = lambda_arg(codec, lambda_index)?;
        let mode = match mask {
            ManfMaskMode::Variance => MaskMode::Variance(DEFAULT_VARIANCE_THRESHOLD),
            ManfMaskMode::Rdo => MaskMode::Rdo,
            ManfMaskMode::Fine => MaskMode::Uniform(1),
            ManfMaskMode::Coarse => MaskMode::Uniform(2),
        };
        let enc = codec.encode_with(&image, &mode, index)?;
        if let Some(s) = stats.as_mut() {
            *s = ManfEncodeStats {
                bpp: enc.bpp,
                estimated_bits: enc.estimated_bits,
                psnr_rgb_db: psnr_rgb(&image, &enc.reconstruction)?.db,
                level1_fraction: enc.mask.fraction(1),
            };
        }
        let (data, len) = into_raw(enc.bytes);
        *out = ManfBuffer { data, len };
        Ok(())
    })
}

/// Reconstructs an image from a bitstream, released with [`manf_image_free`].
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn manf_decode_rgb8(
    codec: *const ManfCodec,
    data: *const u8,
    len: usize,
    out: *mut ManfImage,
) -> ManfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ManfImage { data: ptr::null_mut(), width: 0, height: 0 };
        let dec = codec_ref(codec)?.decode(slice(data, len, "data")?)?;
        let (width, height) = (dec.image.width(), dec.image.height());
        let (data, _) = into_raw(to_rgb8(&dec.image)?);
        *out = ManfImage { data, width, height };
        Ok(())
    })
}

/// # Safety
/// `buffer` must be null or filled by this library; it is reset to empty.
#[no_mangle]
pub unsafe extern "C" fn manf_buffer_free(buffer: *mut ManfBuffer) {
    if let Some(b) = buffer.as_mut() {
        free_raw(b.data, b.len);
        *b = ManfBuffer { data: ptr::null_mut(), len: 0 };
    }
}

/// # Safety
/// `image` must be null or filled by this library; it is reset to empty.
#[no_mangle]
pub unsafe extern "C" fn manf_image_free(image: *mut ManfImage) {
    if let Some(i) = image.as_mut() {
        free_raw(i.data, i.width * i.height * 3);
        *i = ManfImage { data: ptr::null_mut(), width: 0, height: 0 };
    }
}

/// PSNR over R, G and B of two interleaved RGB images, in dB.
///
/// # Safety
/// `a` and `b` must each hold `3 · width · height` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn manf_psnr_rgb8(
    a: *const u8,
    b: *const u8,
    width: usize,
    height: usize,
    out: *mut f64,
) -> ManfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = psnr_rgb(&image_arg(a, width, height)?, &image_arg(b, width, height)?)?.db;
        Ok(())
    })
}

/// MS-SSIM of two interleaved RGB images on a linear scale.
///
/// # Safety
/// As for [`manf_psnr_rgb8`].
#[no_mangle]
pub unsafe extern "C" fn manf_ms_ssim_rgb8(
    a: *const u8,
    b: *const u8,
    width: usize,
    height: usize,
    out: *mut f64,
) -> ManfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ms_ssim(&image_arg(a, width, height)?, &image_arg(b, width, height)?)?;
        Ok(())
    })
}

unsafe fn curve(label: &str, bpp: *const f64, quality: *const f64, n: usize) -> Result<RdCurve, Fail> {
    if n > 0 && (bpp.is_null() || quality.is_null()) {
        return Err(null(label));
    }
    let points = (0..n)
        .map(|i| {
            let q = *quality.add(i);
            RdPoint {
                label: label.to_string(),
                lambda2: 0.0,
                bpp: *bpp.add(i),
                psnr_rgb_db: q,
                ms_ssim: 0.0,
                ms_ssim_db: q,
            }
        })
        .collect();
    Ok(RdCurve::new(label, points))
}

/// BD rate in percent of the test curve against the anchor, quality in dB.
///
/// # Safety
/// Each rate and quality array must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn manf_bd_rate(
    anchor_bpp: *const f64,
    anchor_quality: *const f64,
    anchor_len: usize,
    test_bpp: *const f64,
    test_quality: *const f64,
    test_len: usize,
    out: *mut f64,
) -> ManfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = curve("anchor", anchor_bpp, anchor_quality, anchor_len)?;
        let t = curve("test", test_bpp, test_quality, test_len)?;
        *out = bd_rate(&a, &t, Quality::PsnrRgb)?;
        Ok(())
    })
}
