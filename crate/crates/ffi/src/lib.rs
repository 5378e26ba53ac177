//! C ABI over the `ixvector` library.
//!
//! Every fallible function returns an `IxvStatus` code; on failure the
//! message is kept per thread and can be copied out with
//! [`ixv_last_error_message`]. Objects cross the boundary as opaque handles
//! that the caller releases with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ixvector::config::{EnrollMode, PipelineConfig};
use ixvector::dataio::{segment_recording, Labels, Recording};
use ixvector::features::{compute_psd, FeatureSegment};
use ixvector::systems::{Enrollment, System};
use ixvector::Error;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IxvStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Arguments or inputs are invalid (bad shape, bad config, unknown name).
    Invalid = 2,
    /// Two inputs disagree (dimensions, fingerprints, config hashes).
    Mismatch = 3,
    /// A file is missing, unreadable or corrupt.
    Artifact = 4,
    /// A numerical routine failed.
    Numerical = 5,
    /// The caller's output buffer is too small; the needed size was reported.
    BufferTooSmall = 6,
    /// A bug inside the library; the handle arguments should be discarded.
    Panic = 7,
}

fn status_of(e: &Error) -> IxvStatus {
    match e {
        Error::Mismatch(_) => IxvStatus::Mismatch,
        Error::Artifact { .. } | Error::Io(_) | Error::Csv(_) => IxvStatus::Artifact,
        Error::Numerical(_) | Error::Diverged { .. } => IxvStatus::Numerical,
        _ => IxvStatus::Invalid,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (IxvStatus, String)>) -> IxvStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IxvStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            IxvStatus::Panic
        }
    }
}

fn lib(e: Error) -> (IxvStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (IxvStatus, String) {
    (IxvStatus::NullPointer, format!("`{name}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (IxvStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (IxvStatus::Invalid, format!("`{name}` is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, (IxvStatus, String)> {
    p.as_ref().ok_or_else(|| null(name))
}

/// Copies `s` plus a terminating NUL into `buf`. Returns the needed size
/// through `needed`.
unsafe fn copy_out(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), (IxvStatus, String)> {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() || cap < n {
        return Err((IxvStatus::BufferTooSmall, format!("buffer of {cap} bytes, {n} needed")));
    }
    ptr::copy_nonoverlapping(s.as_ptr() as *const c_char, buf, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Feature tensor of one segment.
pub struct IxvFeatures(FeatureSegment);

/// A trained system loaded from its directory.
pub struct IxvSystem {
    system: System,
    cfg: PipelineConfig,
}

/// Subject references.
pub struct IxvEnrollment(Enrollment);

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ixv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the calling thread's last error message into `buf`. `needed`
/// (optional) receives the size including the NUL. Returns `Ok` with an
/// empty string when there is no error.
///
/// # Safety
/// `buf` must be valid for `cap` bytes or null; `needed` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ixv_last_error_message(buf: *mut c_char, cap: usize, needed: *mut usize) -> IxvStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().as_ref().map(|c| c.to_string_lossy().into_owned()).unwrap_or_default());
    match copy_out(&msg, buf, cap, needed) {
        Ok(()) => IxvStatus::Ok,
        Err((s, _)) => s,
    }
}

/// Reads a feature file written by `extract-features`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ixv_features_load(path: *const c_char, out: *mut *mut IxvFeatures) -> IxvStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let f = FeatureSegment::load(&PathBuf::from(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(IxvFeatures(f)));
        Ok(())
    })
}

/// PSD features of one segment of raw signal. `samples` is channel-major:
/// `n_channels` consecutive runs of `n_samples` values. Every channel is kept
/// and no standardisation is applied, so the result matches what
/// `extract-features` writes under a config that keeps the full montage
/// unstandardised.
///
/// # Safety
/// `subject` must be a NUL-terminated string; `samples` must hold
/// `n_channels * n_samples` floats; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ixv_features_compute(
    subject: *const c_char,
    samples: *const f32,
    n_channels: usize,
    n_samples: usize,
    sample_rate_hz: f64,
    frame_len_ms: f64,
    band_lo_hz: f64,
    band_hi_hz: f64,
    out: *mut *mut IxvFeatures,
) -> IxvStatus {
    guard(|| {
        let subject = str_arg(subject, "subject")?;
        if samples.is_null() {
            return Err(null("samples"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let len = n_channels
            .checked_mul(n_samples)
            .ok_or((IxvStatus::Invalid, "n_channels * n_samples overflows".to_string()))?;
        let data = std::slice::from_raw_parts(samples, len).to_vec();
        let rec = Recording::new(Labels::new(subject, "", ""), sample_rate_hz, n_channels, data).map_err(lib)?;
        let seg = segment_recording(&rec, n_samples as f64 / sample_rate_hz)
            .map_err(lib)?
            .into_iter()
            .next()
            .ok_or((IxvStatus::Invalid, "signal is empty".to_string()))?;
        let f = compute_psd(&seg, frame_len_ms, (band_lo_hz, band_hi_hz)).map_err(lib)?;
        *out = Box::into_raw(Box::new(IxvFeatures(f)));
        Ok(())
    })
}

/// Channels, frames and per-frame dimension of a feature tensor.
///
/// # Safety
/// `f` must be a live handle; the out pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ixv_features_shape(
    f: *const IxvFeatures,
    n_channels: *mut usize,
    n_frames: *mut usize,
    dim: *mut usize,
) -> IxvStatus {
    guard(|| {
        let f = &ref_arg(f, "features")?.0;
        for (p, v) in [(n_channels, f.n_channels()), (n_frames, f.n_frames()), (dim, f.dim())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies the tensor, channel-major then frame-major, into `out`.
///
/// # Safety
/// `f` must be a live handle; `out` must be valid for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn ixv_features_data(f: *const IxvFeatures, out: *mut f64, cap: usize) -> IxvStatus {
    guard(|| {
        let data = ref_arg(f, "features")?.0.data();
        if out.is_null() || cap < data.len() {
            return Err((IxvStatus::BufferTooSmall, format!("buffer of {cap} values, {} needed", data.len())));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
        Ok(())
    })
}

/// # Safety
/// `f` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ixv_features_free(f: *mut IxvFeatures) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Loads a system directory. `config_path` may be null for the default
/// desk config; otherwise it names the TOML file the system was trained
/// with, and a different config hash is reported as `Mismatch`.
///
/// # Safety
/// String arguments must be NUL-terminated (or null where allowed); `out`
/// must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ixv_system_load(dir: *const c_char, config_path: *const c_char, out: *mut *mut IxvSystem) -> IxvStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_path.is_null() {
            PipelineConfig::default()
        } else {
            PipelineConfig::load(&PathBuf::from(str_arg(config_path, "config_path")?)).map_err(lib)?
        };
        let (system, prov) = System::load(&PathBuf::from(dir), &cfg).map_err(lib)?;
        if !config_path.is_null() && prov.config_hash != cfg.hash() {
            return Err((
                IxvStatus::Mismatch,
                format!(
                    "{dir} was trained under config hash {:016x}, the given config hashes to {:016x}",
                    prov.config_hash,
                    cfg.hash()
                ),
            ));
        }
        *out = Box::into_raw(Box::new(IxvSystem { system, cfg }));
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ixv_system_free(s: *mut IxvSystem) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Copies the system kind name (e.g. `ix`) into `buf`.
///
/// # Safety
/// `s` must be a live handle; `buf` valid for `cap` bytes; `needed` valid or null.
#[no_mangle]
pub unsafe extern "C" fn ixv_system_kind(s: *const IxvSystem, buf: *mut c_char, cap: usize, needed: *mut usize) -> IxvStatus {
    guard(|| {
        let s = ref_arg(s, "system")?;
        copy_out(s.system.kind.name(), buf, cap, needed)
    })
}

/// Writes the LDA-projected embedding of `f` into `out` (capacity `cap`);
/// `len` receives its length. Not available for GMM or per-channel systems.
///
/// # Safety
/// Handles must be live; `out` valid for `cap` doubles; `len` valid or null.
#[no_mangle]
pub unsafe extern "C" fn ixv_system_embed(
    s: *const IxvSystem,
    f: *const IxvFeatures,
    out: *mut f64,
    cap: usize,
    len: *mut usize,
) -> IxvStatus {
    guard(|| {
        let s = ref_arg(s, "system")?;
        let f = ref_arg(f, "features")?;
        let e = s.system.embed(&f.0).map_err(lib)?;
        if !len.is_null() {
            *len = e.v.len();
        }
        if out.is_null() || cap < e.v.len() {
            return Err((IxvStatus::BufferTooSmall, format!("buffer of {cap} values, {} needed", e.v.len())));
        }
        ptr::copy_nonoverlapping(e.v.as_ptr(), out, e.v.len());
        Ok(())
    })
}

/// Enrolls every subject found among `features` (by the subject each tensor
/// was labelled with), using the enrollment mode of the system's config.
///
/// # Safety
/// `features` must point to `n` live handles; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ixv_system_enroll(
    s: *const IxvSystem,
    features: *const *const IxvFeatures,
    n: usize,
    out: *mut *mut IxvEnrollment,
) -> IxvStatus {
    guard(|| {
        let s = ref_arg(s, "system")?;
        if features.is_null() {
            return Err(null("features"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let segs = std::slice::from_raw_parts(features, n)
            .iter()
            .enumerate()
            .map(|(i, p)| ref_arg(*p, &format!("features[{i}]")).map(|f| &f.0))
            .collect::<Result<Vec<&FeatureSegment>, _>>()?;
        let mode: EnrollMode = s.cfg.ivector.enroll;
        let e = s.system.enroll(&segs, mode).map_err(lib)?;
        *out = Box::into_raw(Box::new(IxvEnrollment(e)));
        Ok(())
    })
}

/// Reads an enrollment file written by the `enroll` command.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ixv_enrollment_load(path: *const c_char, out: *mut *mut IxvEnrollment) -> IxvStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (e, _) = Enrollment::load(&PathBuf::from(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(IxvEnrollment(e)));
        Ok(())
    })
}

/// Number of enrolled subjects, which is the length of every score row.
///
/// # Safety
/// `e` must be a live handle; `n` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ixv_enrollment_n_subjects(e: *const IxvEnrollment, n: *mut usize) -> IxvStatus {
    guard(|| {
        let e = ref_arg(e, "enrollment")?;
        if n.is_null() {
            return Err(null("n"));
        }
        *n = e.0.subjects().len();
        Ok(())
    })
}

/// Copies the id of the `i`-th enrolled subject (score column `i`).
///
/// # Safety
/// `e` must be a live handle; `buf` valid for `cap` bytes; `needed` valid or null.
#[no_mangle]
pub unsafe extern "C" fn ixv_enrollment_subject(
    e: *const IxvEnrollment,
    i: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> IxvStatus {
    guard(|| {
        let e = ref_arg(e, "enrollment")?;
        let subjects = e.0.subjects();
        let s = subjects
            .get(i)
            .ok_or((IxvStatus::Invalid, format!("subject index {i} out of range ({} enrolled)", subjects.len())))?;
        copy_out(s, buf, cap, needed)
    })
}

/// # Safety
/// `e` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ixv_enrollment_free(e: *mut IxvEnrollment) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Scores one segment against every enrolled subject, writing one score per
/// subject into `scores` (capacity `cap`).
///
/// # Safety
/// Handles must be live; `scores` must be valid for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn ixv_system_score(
    s: *const IxvSystem,
    e: *const IxvEnrollment,
    f: *const IxvFeatures,
    scores: *mut f64,
    cap: usize,
) -> IxvStatus {
    guard(|| {
        let s = ref_arg(s, "system")?;
        let e = ref_arg(e, "enrollment")?;
        let f = ref_arg(f, "features")?;
        let (subjects, rows) = s.system.score_rows(&e.0, &[&f.0]).map_err(lib)?;
        if scores.is_null() || cap < subjects.len() {
            return Err((IxvStatus::BufferTooSmall, format!("buffer of {cap} scores, {} needed", subjects.len())));
        }
        ptr::copy_nonoverlapping(rows[0].as_ptr(), scores, subjects.len());
        Ok(())
    })
}
