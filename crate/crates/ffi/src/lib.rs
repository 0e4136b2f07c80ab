//! C ABI over the `emseg` library.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns an
//! [`EmsegStatus`]; on failure the message is available from
//! [`emseg_last_error`] until the next failing call on the same thread.
//! Panics are caught and reported as `EMSEG_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use emseg::clustering::cluster;
use emseg::config::RunConfig;
use emseg::io::{read_field, read_labels, write_field, write_labels, Dtype};
use emseg::metrics::{average_precision, evaluate};
use emseg::optim::run_optimization;
use emseg::sampling::subsample_objects;
use emseg::synth::{generate, SceneSpec};
use emseg::{EmbeddingField, Error, LabelImage, RngSeed, Supervision};

/// Outcome of an FFI call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmsegStatus {
    Ok = 0,
    /// A required pointer was null or a string was not UTF-8.
    InvalidArgument = 1,
    ShapeMismatch = 2,
    NonFiniteValue = 3,
    InvalidLabel = 4,
    Domain = 5,
    InvalidConfig = 6,
    NoLabeledCluster = 7,
    EmptyInput = 8,
    OffsetOutOfRange = 9,
    InfeasibleSpec = 10,
    DivergenceDetected = 11,
    BadMagic = 12,
    UnsupportedVersion = 13,
    TruncatedFile = 14,
    Encode = 15,
    Io = 16,
    Panic = 17,
}

/// Field value type used when writing EMB1 files.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmsegDtype {
    F32 = 0,
    F64 = 1,
}

/// Supervision mode for `emseg_optimize`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmsegMode {
    Full = 0,
    Sparse = 1,
}

/// Segmentation scores from `emseg_evaluate`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EmsegMetrics {
    pub sbd: f64,
    pub abs_dic: f64,
    pub arand: f64,
    pub ap50: f64,
    pub map: f64,
}

/// Opaque embedding field.
pub struct EmsegField(EmbeddingField);

/// Opaque label image.
pub struct EmsegLabels(LabelImage);

/// Opaque run configuration.
pub struct EmsegConfig(RunConfig);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> EmsegStatus {
    match e {
        Error::ShapeMismatch(_) | Error::AnchorCountMismatch { .. } => EmsegStatus::ShapeMismatch,
        Error::NonFiniteValue(_) => EmsegStatus::NonFiniteValue,
        Error::InvalidLabel(_) => EmsegStatus::InvalidLabel,
        Error::Domain(_) => EmsegStatus::Domain,
        Error::InvalidConfig(_) | Error::Config(_) => EmsegStatus::InvalidConfig,
        Error::NoLabeledCluster => EmsegStatus::NoLabeledCluster,
        Error::EmptyInstance(_)
        | Error::EmptyAnchorSet
        | Error::EmptyUnlabeledRegion
        | Error::NoInstances
        | Error::EmptyForeground
        | Error::TooFewPixels { .. } => EmsegStatus::EmptyInput,
        Error::OffsetOutOfRange(..) => EmsegStatus::OffsetOutOfRange,
        Error::InfeasibleSpec(_) => EmsegStatus::InfeasibleSpec,
        Error::DivergenceDetected { .. } => EmsegStatus::DivergenceDetected,
        Error::BadMagic { .. } => EmsegStatus::BadMagic,
        Error::UnsupportedVersion(_) => EmsegStatus::UnsupportedVersion,
        Error::TruncatedFile(_) => EmsegStatus::TruncatedFile,
        Error::Encode(_) => EmsegStatus::Encode,
        Error::Io(_) => EmsegStatus::Io,
    }
}

struct Fail(EmsegStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), format!("{}: {e}", e.code()))
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(EmsegStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EmsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EmsegStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            EmsegStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(invalid("path is null"));
    }
    CStr::from_ptr(p).to_str().map(PathBuf::from).map_err(|_| invalid("path is not UTF-8"))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn slice_arg<'a, T>(data: *const T, len: usize) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(invalid("data pointer is null"));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

/// Message of the most recent failure on this thread, or an empty string.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn emseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn emseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- fields ----

/// Copies `height * width * channels` row-major, channel-last values into a
/// new field.
///
/// # Safety
/// `data` must point to that many readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emseg_field_new(
    height: usize,
    width: usize,
    channels: usize,
    data: *const f64,
    out: *mut *mut EmsegField,
) -> EmsegStatus {
    guard(|| {
        let len = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| invalid("field size overflows"))?;
        let values = slice_arg(data, len)?.to_vec();
        put(out, EmsegField(EmbeddingField::new(height, width, channels, values)?))
    })
}

/// # Safety
/// `field` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn emseg_field_free(field: *mut EmsegField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// # Safety
/// `field` must be a live handle; the output pointers must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn emseg_field_shape(
    field: *const EmsegField,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> EmsegStatus {
    guard(|| {
        let f = &deref(field, "field")?.0;
        for (p, v) in [(height, f.height()), (width, f.width()), (channels, f.channels())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies the values into `out`, which must hold exactly
/// `height * width * channels` doubles.
///
/// # Safety
/// `field` must be a live handle; `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn emseg_field_copy_data(
    field: *const EmsegField,
    out: *mut f64,
    len: usize,
) -> EmsegStatus {
    guard(|| {
        let data = deref(field, "field")?.0.data();
        if len != data.len() {
            return Err(Fail(
                EmsegStatus::ShapeMismatch,
                format!("buffer holds {len} values, field has {}", data.len()),
            ));
        }
        if out.is_null() {
            return Err(invalid("output buffer is null"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, len);
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emseg_field_read(
    path: *const c_char,
    out: *mut *mut EmsegField,
) -> EmsegStatus {
    guard(|| put(out, EmsegField(read_field(path_arg(path)?)?)))
}

/// # Safety
/// `field` must be a live handle; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn emseg_field_write(
    field: *const EmsegField,
    path: *const c_char,
    dtype: EmsegDtype,
) -> EmsegStatus {
    guard(|| {
        let dtype = match dtype {
            EmsegDtype::F32 => Dtype::F32,
            EmsegDtype::F64 => Dtype::F64,
        };
        write_field(path_arg(path)?, &deref(field, "field")?.0, dtype)?;
        Ok(())
    })
}

// ---- labels ----

/// Copies `height * width` row-major labels into a new label image.
///
/// # Safety
/// `data` must point to that many readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emseg_labels_new(
    height: usize,
    width: usize,
    data: *const u64,
    out: *mut *mut EmsegLabels,
) -> EmsegStatus {
    guard(|| {
        let len = height.checked_mul(width).ok_or_else(|| invalid("label size overflows"))?;
        let values = slice_arg(data, len)?.to_vec();
        put(out, EmsegLabels(LabelImage::new(height, width, values)?))
    })
}

/// # Safety
/// `labels` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn emseg_labels_free(labels: *mut EmsegLabels) {
    if !labels.is_null() {
        drop(Box::from_raw(labels));
    }
}

/// # Safety
/// `labels` must be a live handle; the output pointers must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn emseg_labels_shape(
    labels: *const EmsegLabels,
    height: *mut usize,
    width: *mut usize,
) -> EmsegStatus {
    guard(|| {
        let l = &deref(labels, "labels")?.0;
        if let Some(h) = height.as_mut() {
            *h = l.height();
        }
        if let Some(w) = width.as_mut() {
            *w = l.width();
        }
        Ok(())
    })
}

/// Number of distinct instance ids (labels >= 2).
///
/// # Safety
/// `labels` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emseg_labels_num_instances(
    labels: *const EmsegLabels,
    out: *mut usize,
) -> EmsegStatus {
    guard(|| {
        let n = deref(labels, "labels")?.0.num_instances();
        *out.as_mut().ok_or_else(|| invalid("output pointer is null"))? = n;
        Ok(())
    })
}

/// # Safety
/// `labels` must be a live handle; `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn emseg_labels_copy_data(
    labels: *const EmsegLabels,
    out: *mut u64,
    len: usize,
) -> EmsegStatus {
    guard(|| {
        let data = deref(labels, "labels")?.0.labels();
        if len != data.len() {
            return Err(Fail(
                EmsegStatus::ShapeMismatch,
                format!("buffer holds {len} values, image has {}", data.len()),
            ));
        }
        if out.is_null() {
            return Err(invalid("output buffer is null"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, len);
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emseg_labels_read(
    path: *const c_char,
    out: *mut *mut EmsegLabels,
) -> EmsegStatus {
    guard(|| put(out, EmsegLabels(read_labels(path_arg(path)?)?)))
}

/// # Safety
/// `labels` must be a live handle; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn emseg_labels_write(
    labels: *const EmsegLabels,
    path: *const c_char,
) -> EmsegStatus {
    guard(|| {
        write_labels(path_arg(path)?, &deref(labels, "labels")?.0)?;
        Ok(())
    })
}

// ---- configuration ----

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emseg_config_default(out: *mut *mut EmsegConfig) -> EmsegStatus {
    guard(|| put(out, EmsegConfig(RunConfig::default())))
}

/// Parses a flat TOML run configuration; missing keys take defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emseg_config_from_toml(
    toml: *const c_char,
    out: *mut *mut EmsegConfig,
) -> EmsegStatus {
    guard(|| {
        if toml.is_null() {
            return Err(invalid("config text is null"));
        }
        let text = CStr::from_ptr(toml).to_str().map_err(|_| invalid("config is not UTF-8"))?;
        let cfg = RunConfig::from_toml(text)?;
        cfg.validate()?;
        put(out, EmsegConfig(cfg))
    })
}

/// # Safety
/// `config` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn emseg_config_free(config: *mut EmsegConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

// ---- pipeline ----

/// Synthesizes a scene of `instances` non-overlapping disks.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emseg_generate_disks(
    height: usize,
    width: usize,
    instances: usize,
    radius_min: f64,
    radius_max: f64,
    gap: f64,
    seed: u64,
    out: *mut *mut EmsegLabels,
) -> EmsegStatus {
    guard(|| {
        let spec = SceneSpec {
            height,
            width,
            n_instances: instances,
            radius_min,
            radius_max,
            min_gap: gap,
            seed: RngSeed(seed),
            ..SceneSpec::default()
        };
        put(out, EmsegLabels(generate(&spec)?))
    })
}

/// Optimizes a field against `labels` with the configured loss and
/// schedule. In sparse mode the labels are first subsampled to the
/// configured fraction `p` of instances. `out_g` may be null.
///
/// # Safety
/// Handles must be live; `out_f` must be writable; `out_g` writable or null.
#[no_mangle]
pub unsafe extern "C" fn emseg_optimize(
    config: *const EmsegConfig,
    labels: *const EmsegLabels,
    mode: EmsegMode,
    out_f: *mut *mut EmsegField,
    out_g: *mut *mut EmsegField,
) -> EmsegStatus {
    guard(|| {
        let cfg = &deref(config, "config")?.0;
        let labels = &deref(labels, "labels")?.0;
        if out_f.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let mode = match mode {
            EmsegMode::Full => Supervision::Full,
            EmsegMode::Sparse => Supervision::Sparse,
        };
        let train = match mode {
            Supervision::Full => labels.clone(),
            Supervision::Sparse => subsample_objects(labels, cfg.p, cfg.seed())?,
        };
        let state = run_optimization(
            &train,
            cfg.channels,
            &cfg.loss_config(),
            &cfg.schedule(),
            &cfg.sampling_spec(),
            mode,
            cfg.seed(),
        )?;
        if !out_g.is_null() {
            put(out_g, EmsegField(state.field_g))?;
        }
        put(out_f, EmsegField(state.field_f))
    })
}

/// Clusters `field` with the configured method. `field_g` may be null
/// except for consistency clustering.
///
/// # Safety
/// Handles must be live (or null where allowed); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emseg_cluster(
    config: *const EmsegConfig,
    field: *const EmsegField,
    field_g: *const EmsegField,
    out: *mut *mut EmsegLabels,
) -> EmsegStatus {
    guard(|| {
        let cfg = &deref(config, "config")?.0;
        let f = &deref(field, "field")?.0;
        let g = field_g.as_ref().map(|g| &g.0);
        put(out, EmsegLabels(cluster(f, g, &cfg.cluster_params(), cfg.seed())?))
    })
}

/// Scores `pred` against `gt`; mAP uses the configured thresholds.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emseg_evaluate(
    config: *const EmsegConfig,
    pred: *const EmsegLabels,
    gt: *const EmsegLabels,
    out: *mut EmsegMetrics,
) -> EmsegStatus {
    guard(|| {
        let cfg = &deref(config, "config")?.0;
        let pred = &deref(pred, "pred")?.0;
        let gt = &deref(gt, "gt")?.0;
        let out = out.as_mut().ok_or_else(|| invalid("output pointer is null"))?;
        let report = evaluate(pred, gt, &cfg.thresholds)?;
        let ap50 = match report.ap_at(0.5) {
            Some(v) => v,
            None => average_precision(pred, gt, &[0.5])?.1,
        };
        *out = EmsegMetrics {
            sbd: report.sbd,
            abs_dic: report.abs_dic,
            arand: report.arand,
            ap50,
            map: report.map_score,
        };
        Ok(())
    })
}
