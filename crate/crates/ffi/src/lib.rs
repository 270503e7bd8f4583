//! C ABI over `sits-s4`.
//!
//! Every function returns an [`S4Status`]; on failure the message is kept
//! per thread and can be read with [`s4_last_error`]. Checkpoints are
//! opaque [`S4Checkpoint`] handles released with [`s4_checkpoint_free`].
//! Panics never cross the boundary; they surface as `S4_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use sits_s4::checkpoint::Checkpoint;
use sits_s4::losses::{mmst_contrastive, LossConfig, PixelFeatures};
use sits_s4::sits::{align_indices, cloud_cover_ratio, Modality, ModalitySeries};
use sits_s4::training::predict;
use sits_s4::S4Error;

/// Result codes. Values 2 to 6 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum S4Status {
    Ok = 0,
    /// Null pointer, zero size or other bad argument.
    InvalidArgument = 1,
    InvalidConfig = 2,
    Io = 3,
    NonFiniteLoss = 4,
    IncompatibleCheckpoint = 5,
    MissingCloudMask = 6,
    /// Shape, label-range or series-validity failure.
    InvalidInput = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum S4Modality {
    Radar = 0,
    Optical = 1,
}

impl From<Modality> for S4Modality {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Radar => S4Modality::Radar,
            Modality::Optical => S4Modality::Optical,
        }
    }
}

/// Opaque loaded checkpoint.
pub struct S4Checkpoint {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &S4Error) -> S4Status {
    match err.exit_code() {
        2 => S4Status::InvalidConfig,
        3 => S4Status::Io,
        4 => S4Status::NonFiniteLoss,
        5 => S4Status::IncompatibleCheckpoint,
        6 => S4Status::MissingCloudMask,
        _ => S4Status::InvalidInput,
    }
}

enum Failure {
    Arg(&'static str),
    Core(S4Error),
}

impl From<S4Error> for Failure {
    fn from(e: S4Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> S4Status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => S4Status::Ok,
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg.to_string());
            S4Status::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            S4Status::Panic
        }
    }
}

/// Slice from a pointer, rejecting null (an empty slice may be null).
unsafe fn view<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Arg(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn view_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Arg(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn non_null<T>(p: *mut T, what: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Arg(what))
    } else {
        Ok(())
    }
}

/// NUL-terminated library version.
#[no_mangle]
pub extern "C" fn s4_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// plus one for the terminator.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn s4_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// Nearest-timestamp pairing of two strictly increasing timestamp lists.
/// Writes `min(n_radar, n_optical)` frame indices per modality and the
/// anchor (the shorter list; radar on ties).
///
/// # Safety
/// Inputs must be valid for their lengths; both outputs for
/// `min(n_radar, n_optical)` elements.
#[no_mangle]
pub unsafe extern "C" fn s4_align_timestamps(
    radar: *const i64,
    n_radar: usize,
    optical: *const i64,
    n_optical: usize,
    out_radar_index: *mut usize,
    out_optical_index: *mut usize,
    out_anchor: *mut S4Modality,
) -> S4Status {
    guard(|| {
        let r = view(radar, n_radar, "radar timestamps are null")?;
        let o = view(optical, n_optical, "optical timestamps are null")?;
        if r.is_empty() || o.is_empty() {
            return Err(S4Error::EmptySeries("cannot align an empty series".into()).into());
        }
        for (name, ts) in [("radar", r), ("optical", o)] {
            if ts.windows(2).any(|w| w[0] >= w[1]) {
                return Err(S4Error::InvalidSeries(format!("{name} timestamps are not strictly increasing")).into());
            }
        }
        non_null(out_anchor, "out_anchor is null")?;
        let n = r.len().min(o.len());
        let out_r = view_mut(out_radar_index, n, "out_radar_index is null")?;
        let out_o = view_mut(out_optical_index, n, "out_optical_index is null")?;
        let (anchor, pairing) = align_indices(r, o);
        for (i, (a, b)) in pairing.into_iter().enumerate() {
            let (ri, oi) = match anchor {
                Modality::Radar => (a, b),
                Modality::Optical => (b, a),
            };
            out_r[i] = ri;
            out_o[i] = oi;
        }
        *out_anchor = anchor.into();
        Ok(())
    })
}

/// Fraction of clouded pixels of a `[T, H, W]` mask (nonzero = cloud).
///
/// # Safety
/// `mask` must be valid for `frames * height * width` bytes.
#[no_mangle]
pub unsafe extern "C" fn s4_cloud_cover_ratio(
    mask: *const u8,
    frames: usize,
    height: usize,
    width: usize,
    out_ratio: *mut f64,
) -> S4Status {
    guard(|| {
        non_null(out_ratio, "out_ratio is null")?;
        let m = view(mask, frames * height * width, "mask is null")?;
        let bools: Vec<bool> = m.iter().map(|&v| v != 0).collect();
        *out_ratio = cloud_cover_ratio(&bools, [frames, height, width])?;
        Ok(())
    })
}

/// Symmetric pixel-level InfoNCE between two `[pixels, dim]` maps
/// (row-major), every other position serving as a negative.
///
/// # Safety
/// Both maps must be valid for `pixels * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn s4_contrastive_loss(
    first: *const f64,
    second: *const f64,
    pixels: usize,
    dim: usize,
    tau: f64,
    out_loss: *mut f64,
) -> S4Status {
    guard(|| {
        non_null(out_loss, "out_loss is null")?;
        if pixels == 0 || dim == 0 {
            return Err(Failure::Arg("pixels and dim must be nonzero"));
        }
        let a = view(first, pixels * dim, "first is null")?;
        let b = view(second, pixels * dim, "second is null")?;
        let cfg = LossConfig {
            tau,
            ..LossConfig::default()
        };
        cfg.validate()?;
        *out_loss = mmst_contrastive(
            &PixelFeatures::new(pixels, dim, a.to_vec()),
            &PixelFeatures::new(pixels, dim, b.to_vec()),
            &cfg,
            0,
        )?;
        Ok(())
    })
}

/// Loads a checkpoint file; on success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s4_checkpoint_load(path: *const c_char, out: *mut *mut S4Checkpoint) -> S4Status {
    guard(|| {
        non_null(out, "out is null")?;
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(Failure::Arg("path is null"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| Failure::Arg("path is not UTF-8"))?;
        let inner = Checkpoint::load(Path::new(path), None)?;
        *out = Box::into_raw(Box::new(S4Checkpoint { inner }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `handle` must come from [`s4_checkpoint_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn s4_checkpoint_free(handle: *mut S4Checkpoint) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of segmentation classes and the inference modality.
///
/// # Safety
/// `handle` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn s4_checkpoint_info(
    handle: *const S4Checkpoint,
    out_classes: *mut usize,
    out_modality: *mut S4Modality,
) -> S4Status {
    guard(|| {
        let h = handle.as_ref().ok_or(Failure::Arg("handle is null"))?;
        non_null(out_classes, "out_classes is null")?;
        non_null(out_modality, "out_modality is null")?;
        *out_classes = h.inner.model.config().classes;
        *out_modality = h.inner.train.inference_modality.into();
        Ok(())
    })
}

/// Segments one raw `[T, C, H, W]` series (row-major float32) of the
/// checkpoint's inference modality into `height * width` class indices.
/// `modality` is an `S4Modality` value.
///
/// # Safety
/// `handle` must be a live handle used by one thread at a time; `data`
/// valid for `T*C*H*W` floats, `timestamps` for `T` values and
/// `out_labels` for `H*W` ints.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn s4_predict(
    handle: *mut S4Checkpoint,
    modality: u32,
    data: *const f32,
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    timestamps: *const i64,
    out_labels: *mut i32,
) -> S4Status {
    guard(|| {
        let h = handle.as_mut().ok_or(Failure::Arg("handle is null"))?;
        let modality = match modality {
            0 => Modality::Radar,
            1 => Modality::Optical,
            _ => return Err(Failure::Arg("unknown modality")),
        };
        let len = frames * channels * height * width;
        if len == 0 {
            return Err(Failure::Arg("series dimensions must be nonzero"));
        }
        let values = view(data, len, "data is null")?;
        let ts = view(timestamps, frames, "timestamps are null")?;
        let out = view_mut(out_labels, height * width, "out_labels is null")?;
        let series = ModalitySeries::new(
            modality,
            [frames, channels, height, width],
            ts.to_vec(),
            values.to_vec(),
        )?;
        let labels = predict(&mut h.inner, &series)?;
        out.copy_from_slice(&labels);
        Ok(())
    })
}
