//! C ABI over the `cacps` library.
//!
//! Every fallible function returns a [`CacpsStatus`]; on failure the
//! message is available from [`cacps_last_error`] on the same thread.
//! Arrays are row-major `double` planes in `[0, 1]` unless noted. Network
//! pairs are opaque handles freed with [`cacps_pair_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use cacps::checkpoint;
use cacps::fourier::{augment, MixConfig, MixMode};
use cacps::metrics::{dice_score, hausdorff};
use cacps::raster::{BinaryMask, Image};
use cacps::segnet::{init_pair, NetSpec, NetworkPair};
use cacps::trainer::infer_ensemble;
use cacps::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacpsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Checkpoint = 5,
    Config = 6,
    NonFinite = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacpsMixMode {
    Strict = 0,
    Rectified = 1,
}

/// Network architecture, mirroring the library's `NetSpec`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CacpsNetSpec {
    pub in_channels: u32,
    pub num_classes: u32,
    pub base_width: u32,
    pub depth: u32,
    pub instance_norm: bool,
}

/// Two segmentation networks whose averaged prediction is the output.
pub struct CacpsPair {
    inner: NetworkPair,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> CacpsStatus {
    match err {
        Error::ShapeMismatch { .. } => CacpsStatus::ShapeMismatch,
        Error::NonFinite { .. } | Error::NonFiniteGradient(_) => CacpsStatus::NonFinite,
        Error::Config(_) => CacpsStatus::Config,
        Error::Checkpoint(_) => CacpsStatus::Checkpoint,
        Error::Io(_) | Error::Image(_) | Error::Corpus { .. } => CacpsStatus::Io,
        _ => CacpsStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic for [`cacps_last_error`].
fn guard(f: impl FnOnce() -> Result<(), CacpsStatus>) -> CacpsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CacpsStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            CacpsStatus::Panic
        }
    }
}

fn fail(err: Error) -> CacpsStatus {
    set_error(&err.to_string());
    status_of(&err)
}

fn null(what: &str) -> CacpsStatus {
    set_error(&format!("{what} is null"));
    CacpsStatus::NullPointer
}

fn plane_len(height: usize, width: usize) -> Result<usize, CacpsStatus> {
    match height.checked_mul(width) {
        Some(n) if n > 0 => Ok(n),
        _ => {
            set_error(&format!("invalid size {height}x{width}"));
            Err(CacpsStatus::InvalidArgument)
        }
    }
}

/// # Safety
/// `p` must be null or point to `n` readable values.
unsafe fn input<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], CacpsStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or point to `n` writable values.
unsafe fn output<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], CacpsStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cacps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn cacps_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Initializes a pair with distinct seeds.
///
/// # Safety
/// `spec` must point to a valid spec and `out` to writable storage for a
/// handle. On success `*out` owns a pair to release with [`cacps_pair_free`].
#[no_mangle]
pub unsafe extern "C" fn cacps_pair_new(
    spec: *const CacpsNetSpec,
    seed1: u64,
    seed2: u64,
    out: *mut *mut CacpsPair,
) -> CacpsStatus {
    guard(|| {
        if spec.is_null() {
            return Err(null("spec"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let s = *spec;
        let net = NetSpec {
            in_channels: s.in_channels as usize,
            num_classes: s.num_classes as usize,
            base_width: s.base_width as usize,
            depth: s.depth as usize,
            instance_norm: s.instance_norm,
        };
        let inner = init_pair(net, seed1, seed2).map_err(fail)?;
        *out = Box::into_raw(Box::new(CacpsPair { inner }));
        Ok(())
    })
}

/// Loads the pair stored in a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cacps_pair_load_checkpoint(path: *const c_char, out: *mut *mut CacpsPair) -> CacpsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| {
            set_error("path is not UTF-8");
            CacpsStatus::InvalidArgument
        })?;
        let ck = checkpoint::load(Path::new(p)).map_err(fail)?;
        *out = Box::into_raw(Box::new(CacpsPair { inner: ck.trainer.pair }));
        Ok(())
    })
}

/// Releases a pair; null is ignored.
///
/// # Safety
/// `pair` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cacps_pair_free(pair: *mut CacpsPair) {
    if !pair.is_null() {
        drop(Box::from_raw(pair));
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `pair` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cacps_pair_num_classes(pair: *const CacpsPair) -> u32 {
    pair.as_ref().map_or(0, |p| p.inner.spec.num_classes as u32)
}

/// Ensemble prediction on one single-channel image whose sides are
/// multiples of `2^depth`.
///
/// `probs` receives `num_classes × height × width` values (class-major) and
/// may be null; `labels` receives `height × width` argmax classes and may be
/// null.
///
/// # Safety
/// `image` must hold `height × width` values and non-null outputs must be
/// large enough.
#[no_mangle]
pub unsafe extern "C" fn cacps_pair_infer(
    pair: *const CacpsPair,
    image: *const f64,
    height: usize,
    width: usize,
    probs: *mut f64,
    labels: *mut u8,
) -> CacpsStatus {
    guard(|| {
        let Some(pair) = pair.as_ref() else {
            return Err(null("pair"));
        };
        let n = plane_len(height, width)?;
        let x = input(image, n, "image")?;
        let img = Image::new(1, height, width, x.to_vec()).map_err(fail)?;
        let batch = Image::stack(&[&img]).map_err(fail)?;
        let (p, maps) = infer_ensemble(&pair.inner, &batch).map_err(fail)?;
        if !probs.is_null() {
            let c = pair.inner.spec.num_classes;
            output(probs, c * n, "probs")?.copy_from_slice(p.data());
        }
        if !labels.is_null() {
            output(labels, n, "labels")?.copy_from_slice(maps[0].data());
        }
        Ok(())
    })
}

/// Amplitude-spectrum mixing of `x` towards `partner`; writes `height × width`
/// values to `out`.
///
/// # Safety
/// `x`, `partner` and `out` must each hold `height × width` values.
#[no_mangle]
pub unsafe extern "C" fn cacps_augment(
    x: *const f64,
    partner: *const f64,
    height: usize,
    width: usize,
    lambda: f64,
    alpha: f64,
    mode: CacpsMixMode,
    out: *mut f64,
) -> CacpsStatus {
    guard(|| {
        let n = plane_len(height, width)?;
        let a = Image::new(1, height, width, input(x, n, "x")?.to_vec()).map_err(fail)?;
        let b = Image::new(1, height, width, input(partner, n, "partner")?.to_vec()).map_err(fail)?;
        let cfg = MixConfig {
            lambda,
            alpha,
            mode: match mode {
                CacpsMixMode::Strict => MixMode::Strict,
                CacpsMixMode::Rectified => MixMode::Rectified,
            },
        };
        let z = augment(&a, &b, &cfg).map_err(fail)?;
        output(out, n, "out")?.copy_from_slice(z.data());
        Ok(())
    })
}

/// # Safety
/// `p` must hold `height × width` bytes.
unsafe fn mask(p: *const u8, height: usize, width: usize, what: &str) -> Result<BinaryMask, CacpsStatus> {
    let n = plane_len(height, width)?;
    let data = input(p, n, what)?.iter().map(|&v| v != 0).collect();
    BinaryMask::new(height, width, data).map_err(fail)
}

/// Dice overlap of two binary masks (nonzero bytes are foreground).
///
/// # Safety
/// `pred` and `truth` must hold `height × width` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cacps_dice(
    pred: *const u8,
    truth: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> CacpsStatus {
    guard(|| {
        let (p, t) = (mask(pred, height, width, "pred")?, mask(truth, height, width, "truth")?);
        let d = dice_score(&p, &t).map_err(fail)?;
        *output(out, 1, "out")?.first_mut().expect("one slot") = d;
        Ok(())
    })
}

/// Hausdorff distance between the boundaries of two binary masks.
/// `*defined` is false (and `*out` NaN) when exactly one mask is empty.
///
/// # Safety
/// `pred` and `truth` must hold `height × width` bytes; `out` and `defined`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn cacps_hausdorff(
    pred: *const u8,
    truth: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
    defined: *mut bool,
) -> CacpsStatus {
    guard(|| {
        let (p, t) = (mask(pred, height, width, "pred")?, mask(truth, height, width, "truth")?);
        if out.is_null() {
            return Err(null("out"));
        }
        if defined.is_null() {
            return Err(null("defined"));
        }
        let h = hausdorff(&p, &t).map_err(fail)?;
        ptr::write(out, h.unwrap_or(f64::NAN));
        ptr::write(defined, h.is_some());
        Ok(())
    })
}
