//! C interface to the patchtrack tracker.
//!
//! Every entry point returns a [`PtStatus`]. On failure the message is kept
//! per thread and read back with [`pt_last_error`]. Frames are 8-bit
//! grayscale with an explicit row stride.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use patchtrack::bench::{compute_curves, BBox};
use patchtrack::error::Error;
use patchtrack::image::GrayImage;
use patchtrack::tracker::{Tracker, TrackerConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Numeric = 4,
    InvalidState = 5,
    Internal = 6,
}

/// Opaque tracker handle.
pub struct PtTracker {
    inner: Tracker,
}

/// Tunable subset of the tracker configuration. Fill with
/// [`pt_config_default`] before changing fields.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PtConfig {
    pub n_particles: u32,
    pub n_templates: u32,
    pub upsilon: u32,
    /// Random-walk standard deviations for (lx, ly, theta, s, psi, phi).
    pub sigma: [f64; 6],
    pub eps: f64,
    pub delta: f64,
    pub seed: u64,
}

/// Result of one tracked frame.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PtRecord {
    pub frame_index: u64,
    /// 0-based `(x, y, w, h)`.
    pub bbox: [f64; 4],
    pub likelihood: f64,
    pub gamma: f64,
    pub clear_small: f64,
    pub clear_large: f64,
    pub dictionary_gate: bool,
    pub degenerate: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PtMetrics {
    pub dp20: f64,
    pub auc: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with_borrow_mut(|e| *e = Some(msg));
}

fn status_of(err: &Error) -> PtStatus {
    match err {
        Error::Config(_) | Error::Parse { .. } => PtStatus::InvalidArgument,
        Error::Dimension(_) | Error::Image(_) => PtStatus::Dimension,
        Error::Numeric { .. } => PtStatus::Numeric,
        Error::InvalidState(_) | Error::Contract(_) => PtStatus::InvalidState,
        Error::Io(_) => PtStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), PtStatus>) -> PtStatus {
    LAST_ERROR.with_borrow_mut(|e| *e = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PtStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("internal panic");
            PtStatus::Internal
        }
    }
}

fn fail(err: Error) -> PtStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

fn null(what: &str) -> PtStatus {
    set_error(format!("{what} is null"));
    PtStatus::NullPointer
}

/// Copies a strided 8-bit frame into a [`GrayImage`].
///
/// # Safety
/// `pixels` must point to `stride * (height - 1) + width` readable bytes.
unsafe fn read_frame(pixels: *const u8, width: u32, height: u32, stride: u32) -> Result<GrayImage, PtStatus> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let (w, h, s) = (width as usize, height as usize, stride as usize);
    if w == 0 || h == 0 || s < w {
        set_error(format!("bad frame geometry {w}x{h} stride {s}"));
        return Err(PtStatus::Dimension);
    }
    let mut bytes = Vec::with_capacity(w * h);
    for y in 0..h {
        // SAFETY: row y lies within the buffer the caller promised.
        bytes.extend_from_slice(std::slice::from_raw_parts(pixels.add(y * s), w));
    }
    GrayImage::from_luma8(w, h, &bytes).map_err(fail)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn pt_last_error() -> *const c_char {
    LAST_ERROR.with_borrow(|e| e.as_ref().map_or(ptr::null(), |m| m.as_ptr()))
}

/// Writes the default configuration to `out`.
///
/// # Safety
/// `out` must be NULL or point to writable memory for one `PtConfig`.
#[no_mangle]
pub unsafe extern "C" fn pt_config_default(out: *mut PtConfig) -> PtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let d = TrackerConfig::default();
        out.write(PtConfig {
            n_particles: d.n_particles as u32,
            n_templates: d.n_templates as u32,
            upsilon: d.upsilon as u32,
            sigma: d.sigma,
            eps: d.eps,
            delta: d.delta,
            seed: d.seed,
        });
        Ok(())
    })
}

/// Creates a tracker from the first frame and a 0-based `(x, y, w, h)` box.
/// `config` may be NULL for defaults. On success `*out` owns the handle.
///
/// # Safety
/// `pixels` must satisfy [`pt_tracker_step`]'s frame contract, `bbox` must
/// point to 4 doubles, `config` must be NULL or valid, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pt_tracker_new(
    pixels: *const u8,
    width: u32,
    height: u32,
    stride: u32,
    bbox: *const f64,
    config: *const PtConfig,
    out: *mut *mut PtTracker,
) -> PtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        out.write(ptr::null_mut());
        if bbox.is_null() {
            return Err(null("bbox"));
        }
        let frame = read_frame(pixels, width, height, stride)?;
        let mut cfg = TrackerConfig::default();
        if let Some(c) = config.as_ref() {
            cfg.n_particles = c.n_particles as usize;
            cfg.n_templates = c.n_templates as usize;
            cfg.upsilon = c.upsilon as usize;
            cfg.sigma = c.sigma;
            cfg.eps = c.eps;
            cfg.delta = c.delta;
            cfg.seed = c.seed;
        }
        let b = [*bbox, *bbox.add(1), *bbox.add(2), *bbox.add(3)];
        let inner = Tracker::init(&frame, b, cfg).map_err(fail)?;
        out.write(Box::into_raw(Box::new(PtTracker { inner })));
        Ok(())
    })
}

/// Tracks one frame and writes the result to `out`.
///
/// # Safety
/// `tracker` must come from [`pt_tracker_new`] and not be freed. `pixels`
/// must point to `stride * (height - 1) + width` readable bytes. `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn pt_tracker_step(
    tracker: *mut PtTracker,
    pixels: *const u8,
    width: u32,
    height: u32,
    stride: u32,
    out: *mut PtRecord,
) -> PtStatus {
    guard(|| {
        let Some(t) = tracker.as_mut() else {
            return Err(null("tracker"));
        };
        if out.is_null() {
            return Err(null("out"));
        }
        let frame = read_frame(pixels, width, height, stride)?;
        let r = t.inner.step(&frame).map_err(fail)?;
        out.write(PtRecord {
            frame_index: r.frame_index as u64,
            bbox: r.bbox,
            likelihood: r.likelihood,
            gamma: r.gamma,
            clear_small: r.clear_fractions.0,
            clear_large: r.clear_fractions.1,
            dictionary_gate: r.dictionary_gate,
            degenerate: r.degenerate,
        });
        Ok(())
    })
}

/// Releases a tracker. NULL is ignored.
///
/// # Safety
/// `tracker` must be NULL or a live handle from [`pt_tracker_new`].
#[no_mangle]
pub unsafe extern "C" fn pt_tracker_free(tracker: *mut PtTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}

/// Distance precision at 20 px and success AUC of `n` tracked boxes against
/// `n` ground-truth boxes, both packed as `(x, y, w, h)`.
///
/// # Safety
/// `track` and `gt` must each point to `4 * n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pt_metrics(track: *const f64, gt: *const f64, n: usize, out: *mut PtMetrics) -> PtStatus {
    guard(|| {
        if track.is_null() || gt.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let boxes = |p: *const f64| -> Vec<BBox> {
            // SAFETY: the caller promised 4 * n doubles.
            let s = std::slice::from_raw_parts(p, 4 * n);
            s.chunks_exact(4).map(|c| BBox::new(c[0], c[1], c[2], c[3])).collect()
        };
        let curves = compute_curves(&boxes(track), &boxes(gt)).map_err(fail)?;
        out.write(PtMetrics {
            dp20: curves.dp20,
            auc: curves.auc,
        });
        Ok(())
    })
}
