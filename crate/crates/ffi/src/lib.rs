//! C ABI over the camannot core.
//!
//! Every fallible function returns a [`CamannotStatus`]. On failure a
//! message is available from [`camannot_last_error`] on the same thread
//! until the next failing call. Handles are opaque and must be released
//! with their `_free` function. Strings returned as `char *` are owned by
//! the caller and released with [`camannot_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use camannot::dataset::{self, Dataset};
use camannot::evaluation::{self, ConfusionMatrix};
use camannot::gateway::Gateway;
use camannot::taxonomy::{CleanLabelSet, LabelDictionary};
use camannot::zeroshot::{self, MappingApproach, RunContext, TargetSet};
use camannot::IntensityClass;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamannotStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    /// The quantity is mathematically undefined for this input.
    Undefined = 5,
    Backend = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamannotIntensity {
    Sb = 0,
    Lipa = 1,
    Mvpa = 2,
    Sleep = 3,
    Unknown = 4,
}

impl From<IntensityClass> for CamannotIntensity {
    fn from(c: IntensityClass) -> Self {
        match c {
            IntensityClass::Sedentary => CamannotIntensity::Sb,
            IntensityClass::Light => CamannotIntensity::Lipa,
            IntensityClass::ModerateVigorous => CamannotIntensity::Mvpa,
            IntensityClass::Sleep => CamannotIntensity::Sleep,
            IntensityClass::Unknown => CamannotIntensity::Unknown,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamannotApproach {
    Direct = 0,
    ViaClean = 1,
}

pub const CAMANNOT_HAS_PRECISION: u32 = 1;
pub const CAMANNOT_HAS_RECALL: u32 = 2;
pub const CAMANNOT_HAS_F1: u32 = 4;

/// One-vs-rest metrics. A field is meaningful only when its bit is set in
/// `defined`; undefined fields hold NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CamannotClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub defined: u32,
}

/// A loaded dataset directory.
pub struct CamannotDataset {
    inner: Dataset,
}

/// A label dictionary CSV.
pub struct CamannotDictionary {
    inner: LabelDictionary,
}

/// A stub-backed text classifier over a fixed target set.
pub struct CamannotClassifier {
    gateway: Gateway,
    targets: TargetSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

type Failure = (CamannotStatus, String);

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> CamannotStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CamannotStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CamannotStatus::Panic
        }
    }
}

fn fail<E: std::fmt::Display>(status: CamannotStatus) -> impl FnOnce(E) -> Failure {
    move |e| (status, e.to_string())
}

unsafe fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| (CamannotStatus::NullPointer, format!("{name} is null")))
}

unsafe fn in_ref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| (CamannotStatus::NullPointer, format!("{name} is null")))
}

unsafe fn in_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((CamannotStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CamannotStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

unsafe fn in_path(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    in_str(p, name).map(PathBuf::from)
}

unsafe fn matrix(counts: *const u64) -> Result<ConfusionMatrix, Failure> {
    if counts.is_null() {
        return Err((CamannotStatus::NullPointer, "counts is null".into()));
    }
    let flat = std::slice::from_raw_parts(counts, 9);
    let mut m = [[0u64; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row.copy_from_slice(&flat[3 * i..3 * i + 3]);
    }
    Ok(ConfusionMatrix::new(m))
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn camannot_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn camannot_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn camannot_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Cohen's kappa of a row-major 3x3 confusion matrix (truth rows, predicted
/// columns, SB/LIPA/MVPA order). Returns `Undefined` for an empty matrix or
/// chance agreement of one.
///
/// # Safety
/// `counts` must point to 9 readable values and `out` to a writable double.
#[no_mangle]
pub unsafe extern "C" fn camannot_kappa(counts: *const u64, out: *mut f64) -> CamannotStatus {
    guard(|| {
        let m = matrix(counts)?;
        let out = out_ref(out, "out")?;
        let k = evaluation::cohens_kappa(&m).ok_or((CamannotStatus::Undefined, "kappa is undefined".to_string()))?;
        *out = k;
        Ok(())
    })
}

/// # Safety
/// `counts` must point to 9 readable values and `out` to a writable struct.
#[no_mangle]
pub unsafe extern "C" fn camannot_class_metrics(
    counts: *const u64,
    class_index: u32,
    out: *mut CamannotClassMetrics,
) -> CamannotStatus {
    guard(|| {
        let m = matrix(counts)?;
        let out = out_ref(out, "out")?;
        if class_index > 2 {
            return Err((CamannotStatus::InvalidArgument, format!("class index {class_index} not in 0..=2")));
        }
        let s = evaluation::class_stats(&m, class_index as usize);
        let mut defined = 0;
        let mut take = |v: Option<f64>, bit: u32| match v {
            Some(x) => {
                defined |= bit;
                x
            }
            None => f64::NAN,
        };
        let precision = take(s.precision, CAMANNOT_HAS_PRECISION);
        let recall = take(s.recall, CAMANNOT_HAS_RECALL);
        let f1 = take(s.f1, CAMANNOT_HAS_F1);
        *out = CamannotClassMetrics { precision, recall, f1, support: s.support, defined };
        Ok(())
    })
}

/// Labelled hours: `n_labelled * median_dt_s / 3600`, plus the nearest whole hour.
///
/// # Safety
/// `hours` and `rounded` must be writable.
#[no_mangle]
pub unsafe extern "C" fn camannot_time_covered(
    n_labelled: u64,
    median_dt_s: f64,
    hours: *mut f64,
    rounded: *mut u64,
) -> CamannotStatus {
    guard(|| {
        let (hours, rounded) = (out_ref(hours, "hours")?, out_ref(rounded, "rounded")?);
        let t = camannot::audit::time_covered(n_labelled, median_dt_s).map_err(fail(CamannotStatus::InvalidArgument))?;
        *hours = t.hours;
        *rounded = t.rounded;
        Ok(())
    })
}

/// Image obscurity statistics over interleaved RGB bytes.
///
/// # Safety
/// `rgb` must point to `len` readable bytes; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn camannot_image_stats(
    rgb: *const u8,
    len: usize,
    mean_star: *mut f64,
    variance_star: *mut f64,
) -> CamannotStatus {
    guard(|| {
        if rgb.is_null() {
            return Err((CamannotStatus::NullPointer, "rgb is null".into()));
        }
        let (m, v) = (out_ref(mean_star, "mean_star")?, out_ref(variance_star, "variance_star")?);
        let pixels = std::slice::from_raw_parts(rgb, len);
        let s = camannot::audit::image_stats(pixels).map_err(fail(CamannotStatus::InvalidArgument))?;
        *m = s.mean_star;
        *v = s.variance_star;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn camannot_dictionary_load(
    path: *const c_char,
    out: *mut *mut CamannotDictionary,
) -> CamannotStatus {
    guard(|| {
        let path = in_path(path, "path")?;
        let out = out_ref(out, "out")?;
        let inner = LabelDictionary::from_csv_path(&path).map_err(|e| {
            let status = match e {
                camannot::taxonomy::DictionaryError::Io { .. } => CamannotStatus::Io,
                _ => CamannotStatus::Parse,
            };
            (status, e.to_string())
        })?;
        *out = Box::into_raw(Box::new(CamannotDictionary { inner }));
        Ok(())
    })
}

/// Intensity of a raw label; trivial and unmapped labels give `Unknown`.
///
/// # Safety
/// `dict` must be a live handle, `label` NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn camannot_dictionary_lookup(
    dict: *const CamannotDictionary,
    label: *const c_char,
    out: *mut CamannotIntensity,
) -> CamannotStatus {
    guard(|| {
        let dict = in_ref(dict, "dict")?;
        let label = in_str(label, "label")?;
        *out_ref(out, "out")? = dict.inner.lookup_intensity(label).into();
        Ok(())
    })
}

/// # Safety
/// `dict` must be NULL or a handle from [`camannot_dictionary_load`].
#[no_mangle]
pub unsafe extern "C" fn camannot_dictionary_free(dict: *mut CamannotDictionary) {
    if !dict.is_null() {
        drop(Box::from_raw(dict));
    }
}

/// # Safety
/// `dir` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn camannot_dataset_load(dir: *const c_char, out: *mut *mut CamannotDataset) -> CamannotStatus {
    guard(|| {
        let dir = in_path(dir, "dir")?;
        let out = out_ref(out, "out")?;
        let inner = dataset::load(&dir).map_err(|e| {
            let status = match e {
                dataset::DatasetError::Io { .. } => CamannotStatus::Io,
                _ => CamannotStatus::Parse,
            };
            (status, e.to_string())
        })?;
        *out = Box::into_raw(Box::new(CamannotDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle and the outputs writable.
#[no_mangle]
pub unsafe extern "C" fn camannot_dataset_counts(
    ds: *const CamannotDataset,
    n_participants: *mut usize,
    n_records: *mut usize,
) -> CamannotStatus {
    guard(|| {
        let ds = in_ref(ds, "ds")?;
        *out_ref(n_participants, "n_participants")? = ds.inner.records.len();
        *out_ref(n_records, "n_records")? = ds.inner.n_records();
        Ok(())
    })
}

/// Evaluates a predictions JSONL file against the dataset and returns the
/// report as a JSON string in `*json_out`.
///
/// # Safety
/// `ds` must be a live handle, `predictions_path` NUL-terminated and
/// `json_out` writable. Free the result with [`camannot_string_free`].
#[no_mangle]
pub unsafe extern "C" fn camannot_dataset_evaluate(
    ds: *const CamannotDataset,
    predictions_path: *const c_char,
    json_out: *mut *mut c_char,
) -> CamannotStatus {
    guard(|| {
        let ds = in_ref(ds, "ds")?;
        let path = in_path(predictions_path, "predictions_path")?;
        let out = out_ref(json_out, "json_out")?;
        let preds = zeroshot::read_predictions(&path).map_err(|e| {
            let status = match e {
                zeroshot::ZeroShotError::Io { .. } => CamannotStatus::Io,
                _ => CamannotStatus::Parse,
            };
            (status, e.to_string())
        })?;
        let report = evaluation::report(&ds.inner, &preds, &Default::default());
        let json = serde_json::to_string(&report).map_err(fail(CamannotStatus::Parse))?;
        *out = CString::new(json).map_err(fail(CamannotStatus::Parse))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle from [`camannot_dataset_load`].
#[no_mangle]
pub unsafe extern "C" fn camannot_dataset_free(ds: *mut CamannotDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

fn read_clean(path: &Path) -> Result<CleanLabelSet, Failure> {
    let text = std::fs::read_to_string(path).map_err(fail(CamannotStatus::Io))?;
    serde_json::from_str(&text).map_err(fail(CamannotStatus::Parse))
}

/// A classifier over the deterministic stub sentence encoder. `clean_path`
/// (a clean label set JSON) is required for `ViaClean` and ignored otherwise.
///
/// # Safety
/// `model_id` must be NUL-terminated, `clean_path` NULL or NUL-terminated,
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn camannot_classifier_new_stub(
    model_id: *const c_char,
    dim: usize,
    approach: CamannotApproach,
    reworded: bool,
    clean_path: *const c_char,
    out: *mut *mut CamannotClassifier,
) -> CamannotStatus {
    guard(|| {
        let model_id = in_str(model_id, "model_id")?;
        let out = out_ref(out, "out")?;
        if dim == 0 {
            return Err((CamannotStatus::InvalidArgument, "dim must be at least 1".into()));
        }
        let approach = match approach {
            CamannotApproach::Direct => MappingApproach::Direct,
            CamannotApproach::ViaClean => MappingApproach::ViaClean,
        };
        let clean = if approach == MappingApproach::ViaClean {
            Some(read_clean(&in_path(clean_path, "clean_path")?)?)
        } else {
            None
        };
        let gateway = Gateway::stub(model_id, dim);
        let targets = zeroshot::build_targets(approach, reworded, clean.as_ref(), &gateway)
            .map_err(fail(CamannotStatus::InvalidArgument))?;
        *out = Box::into_raw(Box::new(CamannotClassifier { gateway, targets }));
        Ok(())
    })
}

/// Maps free text (such as a caption) to its nearest target's intensity.
///
/// # Safety
/// `cls` must be a live handle, `text` NUL-terminated, outputs writable.
#[no_mangle]
pub unsafe extern "C" fn camannot_classifier_classify_text(
    cls: *const CamannotClassifier,
    text: *const c_char,
    class_out: *mut CamannotIntensity,
    similarity_out: *mut f64,
) -> CamannotStatus {
    guard(|| {
        let cls = in_ref(cls, "cls")?;
        let text = in_str(text, "text")?;
        let (class_out, sim_out) = (out_ref(class_out, "class_out")?, out_ref(similarity_out, "similarity_out")?);
        let ctx = RunContext::dual_encoder("ffi");
        let rec = zeroshot::map_caption(text, "ffi", &cls.targets, &cls.gateway, &ctx);
        if let Some(err) = rec.error {
            return Err((CamannotStatus::Backend, err));
        }
        *class_out = rec.predicted.unwrap_or(IntensityClass::Unknown).into();
        *sim_out = rec.similarity.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Number of targets; writes nothing on failure.
///
/// # Safety
/// `cls` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn camannot_classifier_n_targets(
    cls: *const CamannotClassifier,
    out: *mut usize,
) -> CamannotStatus {
    guard(|| {
        *out_ref(out, "out")? = in_ref(cls, "cls")?.targets.len();
        Ok(())
    })
}

/// # Safety
/// `cls` must be NULL or a handle from [`camannot_classifier_new_stub`].
#[no_mangle]
pub unsafe extern "C" fn camannot_classifier_free(cls: *mut CamannotClassifier) {
    if !cls.is_null() {
        drop(Box::from_raw(cls));
    }
}
