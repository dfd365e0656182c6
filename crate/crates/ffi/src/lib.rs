//! C ABI over steerkit checkpoints.
//!
//! Every function returns a [`SteerkitStatus`]. On failure a message is kept per
//! thread and can be read with [`steerkit_last_error`] until the next call on that
//! thread. Images are `height × width × 3` floats in `[0, 1]`, row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use steerkit::augment::{self, AugmentKind, AugmentParams};
use steerkit::checkpoint::Checkpoint;
use steerkit::data::{Image, CHANNELS};
use steerkit::steer::{delta_steer, embed_images};
use steerkit::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SteerkitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Format = 4,
    Io = 5,
    Numerical = 6,
    MissingMap = 7,
    Panic = 8,
}

/// Augmentation kinds, passed as `uint32_t`.
pub const STEERKIT_KIND_GEO: u32 = 0;
pub const STEERKIT_KIND_PHOTO: u32 = 1;
pub const STEERKIT_KIND_ROT: u32 = 2;

/// Opaque loaded checkpoint.
pub struct SteerkitCheckpoint {
    ck: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SteerkitStatus {
    match e {
        Error::Shape { .. } => SteerkitStatus::ShapeMismatch,
        Error::Validation { .. } | Error::NotFound { .. } => SteerkitStatus::InvalidArgument,
        Error::Usage(_) => SteerkitStatus::MissingMap,
        Error::Format { .. } | Error::Checkpoint(_) => SteerkitStatus::Format,
        Error::Io { .. } => SteerkitStatus::Io,
        Error::NonFinite(_) | Error::Domain { .. } => SteerkitStatus::Numerical,
    }
}

struct Fail(SteerkitStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SteerkitStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SteerkitStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            SteerkitStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(SteerkitStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn kind_of(k: u32) -> Result<AugmentKind, Fail> {
    match k {
        STEERKIT_KIND_GEO => Ok(AugmentKind::Geo),
        STEERKIT_KIND_PHOTO => Ok(AugmentKind::Photo),
        STEERKIT_KIND_ROT => Ok(AugmentKind::Rot),
        other => Err(Fail(SteerkitStatus::InvalidArgument, format!("unknown kind {other}"))),
    }
}

/// # Safety
/// `p` must be valid for `len` reads (or null, which is rejected).
unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be valid for `len` writes (or null, which is rejected).
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Fail> {
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a>(ck: *const SteerkitCheckpoint) -> Result<&'a Checkpoint, Fail> {
    non_null(ck, "checkpoint")?;
    Ok(&(*ck).ck)
}

fn theta_params(kind: u32, theta: &[f64]) -> Result<AugmentParams, Fail> {
    Ok(AugmentParams::new(kind_of(kind)?, theta.to_vec())?)
}

/// Message for the last failed call on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn steerkit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file. Free the handle with [`steerkit_checkpoint_free`].
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn steerkit_checkpoint_load(path: *const c_char, out: *mut *mut SteerkitCheckpoint) -> SteerkitStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(SteerkitStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = Checkpoint::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(SteerkitCheckpoint { ck }));
        Ok(())
    })
}

/// # Safety
/// `ck` must come from [`steerkit_checkpoint_load`] and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn steerkit_checkpoint_free(ck: *mut SteerkitCheckpoint) {
    if !ck.is_null() {
        drop(Box::from_raw(ck));
    }
}

/// Embedding dimension D and expected image side.
///
/// # Safety
/// Pointers must be valid; `image_size` may be null.
#[no_mangle]
pub unsafe extern "C" fn steerkit_checkpoint_dims(
    ck: *const SteerkitCheckpoint,
    embed_dim: *mut usize,
    image_size: *mut usize,
) -> SteerkitStatus {
    guard(|| {
        let c = handle(ck)?;
        non_null(embed_dim, "embed_dim")?;
        *embed_dim = c.model.embed_dim();
        if !image_size.is_null() {
            *image_size = c.model.config.image_size;
        }
        Ok(())
    })
}

/// 1 if the checkpoint has a map for `kind`, else 0.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn steerkit_has_map(ck: *const SteerkitCheckpoint, kind: u32, out: *mut u8) -> SteerkitStatus {
    guard(|| {
        let c = handle(ck)?;
        non_null(out, "out")?;
        *out = c.has_map(kind_of(kind)?) as u8;
        Ok(())
    })
}

/// The checkpoint's default ΔM weight (5 equivariant, 1 invariant).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn steerkit_default_wm(ck: *const SteerkitCheckpoint, out: *mut f64) -> SteerkitStatus {
    guard(|| {
        let c = handle(ck)?;
        non_null(out, "out")?;
        *out = c.default_wm();
        Ok(())
    })
}

/// Embeds `n` images of `size × size × 3` floats into `out` (`n × D`).
///
/// # Safety
/// `pixels` must hold `n·size·size·3` floats and `out` room for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn steerkit_embed(
    ck: *const SteerkitCheckpoint,
    pixels: *const f32,
    n: usize,
    size: usize,
    out: *mut f32,
    out_len: usize,
) -> SteerkitStatus {
    guard(|| {
        let c = handle(ck)?;
        if n == 0 {
            return Err(Fail(SteerkitStatus::InvalidArgument, "n must be at least 1".into()));
        }
        let want = c.model.config.image_size;
        if size != want {
            return Err(Fail(SteerkitStatus::ShapeMismatch, format!("images must be {want}×{want}, got {size}")));
        }
        let d = c.model.embed_dim();
        if out_len != n * d {
            return Err(Fail(SteerkitStatus::ShapeMismatch, format!("out_len must be {}, got {out_len}", n * d)));
        }
        let per = size * size * CHANNELS;
        let px = slice(pixels, n * per, "pixels")?;
        let images: Vec<Image> = px.chunks(per).map(|p| Image::new(size, size, p.to_vec())).collect::<Result<_, _>>()?;
        let e = embed_images(&c.model, &c.standardizer, &images.iter().collect::<Vec<_>>())?;
        slice_mut(out, out_len, "out")?.copy_from_slice(e.data());
        Ok(())
    })
}

/// `M(e, θ)` for one embedding of length `d`.
///
/// # Safety
/// `e` and `out` must hold `d` floats, `theta` `theta_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn steerkit_map_apply(
    ck: *const SteerkitCheckpoint,
    kind: u32,
    e: *const f32,
    d: usize,
    theta: *const f64,
    theta_len: usize,
    out: *mut f32,
) -> SteerkitStatus {
    steerkit_delta_steer(ck, kind, e, d, theta, theta_len, 0.0, out)
}

/// `ΔM(e, θ) = M + w_m (M − e)` for one embedding of length `d`.
///
/// # Safety
/// `e` and `out` must hold `d` floats, `theta` `theta_len` doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn steerkit_delta_steer(
    ck: *const SteerkitCheckpoint,
    kind: u32,
    e: *const f32,
    d: usize,
    theta: *const f64,
    theta_len: usize,
    w_m: f64,
    out: *mut f32,
) -> SteerkitStatus {
    guard(|| {
        let c = handle(ck)?;
        let p = theta_params(kind, slice(theta, theta_len, "theta")?)?;
        let m = c.map(p.kind)?;
        if d != m.embed_dim() {
            return Err(Fail(SteerkitStatus::ShapeMismatch, format!("d must be {}, got {d}", m.embed_dim())));
        }
        let v = delta_steer(m, slice(e, d, "e")?, &p, w_m)?;
        slice_mut(out, d, "out")?.copy_from_slice(&v);
        Ok(())
    })
}

/// Applies `g(x; θ)` to one `size × size × 3` image.
///
/// # Safety
/// `pixels` and `out` must hold `size·size·3` floats, `theta` `theta_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn steerkit_augment(
    pixels: *const f32,
    size: usize,
    kind: u32,
    theta: *const f64,
    theta_len: usize,
    out: *mut f32,
) -> SteerkitStatus {
    guard(|| {
        let n = size * size * CHANNELS;
        let img = Image::new(size, size, slice(pixels, n, "pixels")?.to_vec())?;
        let p = theta_params(kind, slice(theta, theta_len, "theta")?)?;
        let a = augment::apply(&img, &p)?;
        slice_mut(out, n, "out")?.copy_from_slice(&a.pixels);
        Ok(())
    })
}

/// Library version, static.
#[no_mangle]
pub extern "C" fn steerkit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
