//! C ABI over the segens toolkit.
//!
//! Images and networks cross the boundary as opaque handles created by a
//! `*_load` / `*_from_*` function and released with the matching `*_free`.
//! Every fallible function returns a [`SegensStatus`]; on failure a message
//! for the calling thread is available from [`segens_last_error`].
//! Output pointers are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use segens::ensemble::{fuse_and, fuse_max, fuse_or, MetaLearner};
use segens::imageio::{load_mask, load_probmap, store_mask, store_probmap, BinaryMask, ProbMap};
use segens::losses::{ft_bu_loss, TverskyConfig};
use segens::metrics::{confusion, dice_from_iou};
use segens::morpho::{boundary_soft_labels, BoundaryUncertaintyConfig};
use segens::ndtensor::Tensor3;
use segens::stats::{clopper_pearson_ci, p_from_ci, wald_ci, CiMethod, Interval};
use segens::{Error, ErrorClass};

/// Result of every fallible call. Values 1 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegensStatus {
    Ok = 0,
    InvalidArgument = 1,
    Io = 2,
    ShapeMismatch = 3,
    Numeric = 4,
    NullPointer = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegensFusion {
    And = 0,
    Or = 1,
    Max = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegensCiMethod {
    Wald = 0,
    ClopperPearson = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegensInterval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub n: u64,
    pub method: SegensCiMethod,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SegensConfusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Binary mask handle.
pub struct SegensMask(BinaryMask);

/// Probability map handle.
pub struct SegensProbMap(ProbMap);

/// Stacking meta-learner handle.
pub struct SegensMetaLearner(MetaLearner);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("interior nul removed"));
}

enum Failure {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

fn guard(body: impl FnOnce() -> FfiResult<()>) -> SegensStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            SegensStatus::Ok
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            match e.class() {
                ErrorClass::Validation => SegensStatus::InvalidArgument,
                ErrorClass::Io => SegensStatus::Io,
                ErrorClass::Shape => SegensStatus::ShapeMismatch,
                ErrorClass::Numeric => SegensStatus::Numeric,
            }
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed as {what}"));
            SegensStatus::NullPointer
        }
        Err(_) => {
            set_error("internal panic");
            SegensStatus::Panic
        }
    }
}

unsafe fn nonnull<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(invalid("path", "not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        name,
        reason: reason.into(),
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

fn interval_out(i: Interval) -> SegensInterval {
    SegensInterval {
        estimate: i.estimate,
        lower: i.lower,
        upper: i.upper,
        level: i.level,
        n: i.n,
        method: match i.method {
            CiMethod::Wald => SegensCiMethod::Wald,
            CiMethod::ClopperPearson => SegensCiMethod::ClopperPearson,
        },
    }
}

/// Message describing the last failure on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn segens_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ---------------------------------------------------------------------------
// Masks

/// Loads an 8-bit PGM or PNG; pixels above 127 are foreground.
///
/// # Safety
/// `path` must be a valid nul-terminated string and `out_mask` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segens_mask_load(path: *const c_char, out_mask: *mut *mut SegensMask) -> SegensStatus {
    guard(|| {
        let path = path_arg(path)?;
        let slot = out(out_mask, "out_mask")?;
        *slot = boxed(SegensMask(load_mask(&path)?));
        Ok(())
    })
}

/// Builds a mask from `width * height` row-major bytes; nonzero is foreground.
///
/// # Safety
/// `data` must point to `width * height` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn segens_mask_from_bytes(
    width: usize,
    height: usize,
    data: *const u8,
    out_mask: *mut *mut SegensMask,
) -> SegensStatus {
    guard(|| {
        let len = width.checked_mul(height).ok_or_else(|| Failure::Lib(invalid("length", "overflow")))?;
        let bytes = slice_arg(data, len, "data")?;
        let slot = out(out_mask, "out_mask")?;
        let mask = BinaryMask::new(width, height, bytes.iter().map(|&b| (b != 0) as u8).collect())?;
        *slot = boxed(SegensMask(mask));
        Ok(())
    })
}

/// # Safety
/// `mask` must be a live handle; `width` and `height` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn segens_mask_dims(mask: *const SegensMask, width: *mut usize, height: *mut usize) -> SegensStatus {
    guard(|| {
        let m = nonnull(mask, "mask")?;
        let (w, h) = m.0.dims();
        let (wo, ho) = (out(width, "width")?, out(height, "height")?);
        *wo = w;
        *ho = h;
        Ok(())
    })
}

/// Copies the 0/1 pixels into `buffer`, which must hold `width * height` bytes;
/// any other `len` is a shape mismatch.
///
/// # Safety
/// `buffer` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn segens_mask_copy(mask: *const SegensMask, buffer: *mut u8, len: usize) -> SegensStatus {
    guard(|| {
        let m = nonnull(mask, "mask")?;
        let data = m.0.data();
        if len != data.len() {
            return Err(Failure::Lib(Error::ShapeMismatch {
                context: "mask buffer",
                expected: format!("{} bytes", data.len()),
                found: format!("{len} bytes"),
            }));
        }
        if buffer.is_null() {
            return Err(Failure::Null("buffer"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buffer, len);
        Ok(())
    })
}

/// Writes the mask as 0/255 grayscale (PNG for a `.png` path, PGM otherwise).
///
/// # Safety
/// `mask` must be a live handle and `path` a valid nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn segens_mask_save(mask: *const SegensMask, path: *const c_char) -> SegensStatus {
    guard(|| {
        let m = nonnull(mask, "mask")?;
        store_mask(&m.0, &path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `mask` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn segens_mask_free(mask: *mut SegensMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

// ---------------------------------------------------------------------------
// Probability maps

/// Loads an 8-bit grayscale file as probabilities `v / 255`.
///
/// # Safety
/// `path` must be a valid nul-terminated string and `out_map` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segens_probmap_load(path: *const c_char, out_map: *mut *mut SegensProbMap) -> SegensStatus {
    guard(|| {
        let path = path_arg(path)?;
        let slot = out(out_map, "out_map")?;
        *slot = boxed(SegensProbMap(load_probmap(&path)?));
        Ok(())
    })
}

/// Builds a map from `width * height` row-major values in `[0, 1]`.
///
/// # Safety
/// `values` must point to `width * height` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn segens_probmap_from_values(
    width: usize,
    height: usize,
    values: *const f64,
    out_map: *mut *mut SegensProbMap,
) -> SegensStatus {
    guard(|| {
        let len = width.checked_mul(height).ok_or_else(|| Failure::Lib(invalid("length", "overflow")))?;
        let v = slice_arg(values, len, "values")?;
        let slot = out(out_map, "out_map")?;
        *slot = boxed(SegensProbMap(ProbMap::new(width, height, v.to_vec())?));
        Ok(())
    })
}

/// # Safety
/// `map` must be a live handle; `width` and `height` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn segens_probmap_dims(map: *const SegensProbMap, width: *mut usize, height: *mut usize) -> SegensStatus {
    guard(|| {
        let m = nonnull(map, "map")?;
        let (w, h) = m.0.dims();
        let (wo, ho) = (out(width, "width")?, out(height, "height")?);
        *wo = w;
        *ho = h;
        Ok(())
    })
}

/// Copies the probabilities into `buffer`, which must hold `width * height`
/// doubles; any other `len` is a shape mismatch.
///
/// # Safety
/// `buffer` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn segens_probmap_copy(map: *const SegensProbMap, buffer: *mut f64, len: usize) -> SegensStatus {
    guard(|| {
        let m = nonnull(map, "map")?;
        let data = m.0.data();
        if len != data.len() {
            return Err(Failure::Lib(Error::ShapeMismatch {
                context: "probability buffer",
                expected: format!("{} values", data.len()),
                found: format!("{len} values"),
            }));
        }
        if buffer.is_null() {
            return Err(Failure::Null("buffer"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buffer, len);
        Ok(())
    })
}

/// Writes the map as 8-bit grayscale, `round(p * 255)`.
///
/// # Safety
/// `map` must be a live handle and `path` a valid nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn segens_probmap_save(map: *const SegensProbMap, path: *const c_char) -> SegensStatus {
    guard(|| {
        let m = nonnull(map, "map")?;
        store_probmap(&m.0, &path_arg(path)?)?;
        Ok(())
    })
}

/// Foreground where `p >= threshold`.
///
/// # Safety
/// `map` must be a live handle and `out_mask` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segens_probmap_binarize(
    map: *const SegensProbMap,
    threshold: f64,
    out_mask: *mut *mut SegensMask,
) -> SegensStatus {
    guard(|| {
        let m = nonnull(map, "map")?;
        let slot = out(out_mask, "out_mask")?;
        *slot = boxed(SegensMask(m.0.binarize(threshold)));
        Ok(())
    })
}

/// # Safety
/// `map` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn segens_probmap_free(map: *mut SegensProbMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

// ---------------------------------------------------------------------------
// Scores and intervals

/// `2 iou / (1 + iou)`.
///
/// # Safety
/// `out_dice` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segens_dice_from_iou(iou: f64, out_dice: *mut f64) -> SegensStatus {
    guard(|| {
        let slot = out(out_dice, "out_dice")?;
        *slot = dice_from_iou(iou)?;
        Ok(())
    })
}

/// Pixel counts of `pred` against `gt`.
///
/// # Safety
/// Both handles must be live and `out_counts` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segens_confusion(
    pred: *const SegensMask,
    gt: *const SegensMask,
    out_counts: *mut SegensConfusion,
) -> SegensStatus {
    guard(|| {
        let c = confusion(&nonnull(pred, "pred")?.0, &nonnull(gt, "gt")?.0)?;
        *out(out_counts, "out_counts")? = SegensConfusion {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
        };
        Ok(())
    })
}

/// Normal-approximation interval, clamped to `[0, 1]`.
///
/// # Safety
/// `out_interval` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segens_wald_ci(p_hat: f64, n: u64, level: f64, out_interval: *mut SegensInterval) -> SegensStatus {
    guard(|| {
        let slot = out(out_interval, "out_interval")?;
        *slot = interval_out(wald_ci(p_hat, n, level)?);
        Ok(())
    })
}

/// Exact binomial interval for `k` successes out of `n`.
///
/// # Safety
/// `out_interval` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segens_clopper_pearson_ci(k: u64, n: u64, level: f64, out_interval: *mut SegensInterval) -> SegensStatus {
    guard(|| {
        let slot = out(out_interval, "out_interval")?;
        *slot = interval_out(clopper_pearson_ci(k, n, level)?);
        Ok(())
    })
}

/// Approximate two-sided p-value of `estimate` against zero from its 95% interval.
///
/// # Safety
/// `out_p` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segens_p_from_ci(estimate: f64, lower: f64, upper: f64, out_p: *mut f64) -> SegensStatus {
    guard(|| {
        let slot = out(out_p, "out_p")?;
        *slot = p_from_ci(estimate, lower, upper)?;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Fusion, soft labels and loss

/// Fuses `count >= 2` maps; `method` is a [`SegensFusion`] value.
/// `And`/`Or` binarize each input at `threshold`
/// first; `Max` takes the pointwise maximum and binarizes it. `out_prob` may
/// be null; with `Max` it receives the fused probabilities, otherwise it is
/// left untouched.
///
/// # Safety
/// `maps` must point to `count` live handles; `out_mask` must be valid.
#[no_mangle]
pub unsafe extern "C" fn segens_fuse(
    method: u32,
    maps: *const *const SegensProbMap,
    count: usize,
    threshold: f64,
    out_mask: *mut *mut SegensMask,
    out_prob: *mut *mut SegensProbMap,
) -> SegensStatus {
    guard(|| {
        let method = match method {
            0 => SegensFusion::And,
            1 => SegensFusion::Or,
            2 => SegensFusion::Max,
            other => return Err(Failure::Lib(invalid("fusion method", format!("{other} is not a SegensFusion value")))),
        };
        let handles = slice_arg(maps, count, "maps")?;
        let inputs = handles
            .iter()
            .map(|&h| nonnull(h, "map").map(|m| m.0.clone()))
            .collect::<FfiResult<Vec<_>>>()?;
        let slot = out(out_mask, "out_mask")?;
        match method {
            SegensFusion::Max => {
                let (prob, mask) = fuse_max(&inputs, threshold)?;
                *slot = boxed(SegensMask(mask));
                if let Some(p) = out_prob.as_mut() {
                    *p = boxed(SegensProbMap(prob));
                }
            }
            SegensFusion::And | SegensFusion::Or => {
                let masks: Vec<_> = inputs.iter().map(|m| m.binarize(threshold)).collect();
                let fused = if method == SegensFusion::And {
                    fuse_and(&masks)?
                } else {
                    fuse_or(&masks)?
                };
                *slot = boxed(SegensMask(fused));
            }
        }
        Ok(())
    })
}

fn bu_config(zeta: f64, omega: f64, iterations: usize) -> FfiResult<BoundaryUncertaintyConfig> {
    Ok(BoundaryUncertaintyConfig::new(zeta, omega, iterations)?)
}

/// Boundary-softened labels of `mask` (inner ring `zeta`, outer ring `omega`)
/// with the flat 3x3 structuring element.
///
/// # Safety
/// `mask` must be a live handle and `out_map` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segens_boundary_soft_labels(
    mask: *const SegensMask,
    zeta: f64,
    omega: f64,
    iterations: usize,
    out_map: *mut *mut SegensProbMap,
) -> SegensStatus {
    guard(|| {
        let m = nonnull(mask, "mask")?;
        let soft = boundary_soft_labels(&m.0, &bu_config(zeta, omega, iterations)?)?;
        let (w, h) = soft.dims();
        let slot = out(out_map, "out_map")?;
        *slot = boxed(SegensProbMap(ProbMap::new(w, h, soft.data().to_vec())?));
        Ok(())
    })
}

/// Focal Tversky loss of `pred` against the boundary-softened `gt`.
///
/// # Safety
/// Both handles must be live and `out_loss` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segens_ft_bu_loss(
    gt: *const SegensMask,
    pred: *const SegensProbMap,
    lambda: f64,
    gamma: f64,
    zeta: f64,
    omega: f64,
    iterations: usize,
    out_loss: *mut f64,
) -> SegensStatus {
    guard(|| {
        let tversky = TverskyConfig {
            lambda,
            gamma,
            ..TverskyConfig::default()
        };
        let lg = ft_bu_loss(
            &nonnull(gt, "gt")?.0,
            &nonnull(pred, "pred")?.0,
            &tversky,
            &bu_config(zeta, omega, iterations)?,
        )?;
        *out(out_loss, "out_loss")? = lg.loss;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Meta-learner

/// Loads a parameter directory written by `segens stack train`.
///
/// # Safety
/// `dir` must be a valid nul-terminated string and `out_net` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segens_metalearner_load(dir: *const c_char, out_net: *mut *mut SegensMetaLearner) -> SegensStatus {
    guard(|| {
        let dir = path_arg(dir)?;
        let slot = out(out_net, "out_net")?;
        let (net, _) = MetaLearner::load(&dir)?;
        *slot = boxed(SegensMetaLearner(net));
        Ok(())
    })
}

/// A network whose prediction is 0.5 everywhere, mainly for testing bindings.
///
/// # Safety
/// `out_net` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segens_metalearner_zeros(in_channels: usize, out_net: *mut *mut SegensMetaLearner) -> SegensStatus {
    guard(|| {
        let slot = out(out_net, "out_net")?;
        *slot = boxed(SegensMetaLearner(MetaLearner::zeros(in_channels)?));
        Ok(())
    })
}

/// # Safety
/// `net` must be a live handle and `out_channels` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn segens_metalearner_in_channels(net: *const SegensMetaLearner, out_channels: *mut usize) -> SegensStatus {
    guard(|| {
        *out(out_channels, "out_channels")? = nonnull(net, "net")?.0.in_channels();
        Ok(())
    })
}

/// Predicts from a `channels x height x width` row-major float stack.
///
/// # Safety
/// `data` must point to `channels * height * width` readable floats.
#[no_mangle]
pub unsafe extern "C" fn segens_metalearner_predict(
    net: *const SegensMetaLearner,
    channels: usize,
    height: usize,
    width: usize,
    data: *const f32,
    out_map: *mut *mut SegensProbMap,
) -> SegensStatus {
    guard(|| {
        let n = nonnull(net, "net")?;
        let len = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Failure::Lib(invalid("length", "overflow")))?;
        let values = slice_arg(data, len, "data")?;
        let input = Tensor3::from_vec(channels, height, width, values.to_vec())?;
        let slot = out(out_map, "out_map")?;
        *slot = boxed(SegensProbMap(n.0.predict(&input)?));
        Ok(())
    })
}

/// # Safety
/// `net` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn segens_metalearner_free(net: *mut SegensMetaLearner) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}
