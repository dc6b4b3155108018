//! C ABI over the decision-pattern toolkit.
//!
//! Handles are opaque heap pointers created and destroyed by this library;
//! every fallible call returns a `DpsStatus` and leaves a human-readable
//! message retrievable with `dps_last_error_message` on failure. The
//! header is generated into `include/dps.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};

use dps_core::error::DpsError;
use dps_core::io::{read_checkpoint, read_dataset};
use dps_core::metrics::{cosine, dps_sample};
use dps_core::model::ModelCheckpoint;
use dps_core::pattern::{
    class_references, extract_batch, gradcam_map, ClassReference, DecisionPattern, Split,
};
use dps_core::tensor::Batch;

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    ClassRange = 4,
    Degenerate = 5,
    Insufficient = 6,
    Incompatible = 7,
    IoError = 8,
    FormatError = 9,
    InternalError = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &DpsError) -> DpsStatus {
    match err {
        DpsError::ShapeMismatch { .. } => DpsStatus::ShapeMismatch,
        DpsError::ClassRange { .. } => DpsStatus::ClassRange,
        DpsError::EmptyInput(_) | DpsError::EmptyClass(_) => DpsStatus::InvalidArgument,
        DpsError::InsufficientSamples { .. } | DpsError::InsufficientClasses(_) => {
            DpsStatus::Insufficient
        }
        DpsError::DegeneratePattern(_) | DpsError::DegenerateFit(_) => DpsStatus::Degenerate,
        DpsError::ReferenceMismatch { .. } | DpsError::Compatibility(_) => DpsStatus::Incompatible,
        DpsError::InvalidModel(_) | DpsError::InvalidConfig(_) => DpsStatus::InvalidArgument,
        DpsError::Numeric(_) => DpsStatus::InternalError,
        DpsError::Format { .. } => DpsStatus::FormatError,
        DpsError::Io { .. } => DpsStatus::IoError,
    }
}

fn fail(err: DpsError) -> DpsStatus {
    set_error(&err.to_string());
    status_of(&err)
}

/// Loaded model checkpoint.
pub struct DpsModel {
    inner: ModelCheckpoint,
}

/// Loaded dataset.
pub struct DpsDataset {
    inner: Batch,
}

/// Decision patterns extracted for every sample of a dataset.
pub struct DpsPatternSet {
    patterns: Vec<DecisionPattern>,
    channels: usize,
}

/// Per-class mean reference patterns.
pub struct DpsReferenceSet {
    references: Vec<ClassReference>,
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Option<&'a str> {
    if ptr.is_null() {
        return None;
    }
    CStr::from_ptr(ptr).to_str().ok()
}

/// Version string of the library; static storage, do not free.
#[no_mangle]
pub extern "C" fn dps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the last error message of this thread into `buf` (truncating,
/// always NUL-terminated) and returns the full message length in bytes.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be NULL (then only the
/// length is returned).
#[no_mangle]
pub unsafe extern "C" fn dps_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let message = slot.borrow();
        let bytes = message.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a model checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be a valid
/// pointer. On success `*out` owns the model and must be released with
/// `dps_model_free`.
#[no_mangle]
pub unsafe extern "C" fn dps_model_load(path: *const c_char, out: *mut *mut DpsModel) -> DpsStatus {
    if out.is_null() {
        set_error("out pointer is null");
        return DpsStatus::NullPointer;
    }
    let Some(path) = cstr_arg(path) else {
        set_error("path is null or not UTF-8");
        return DpsStatus::NullPointer;
    };
    match read_checkpoint(std::path::Path::new(path)) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(DpsModel { inner: model }));
            DpsStatus::Ok
        }
        Err(err) => fail(err),
    }
}

/// # Safety
/// `model` must come from `dps_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dps_model_free(model: *mut DpsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes of the model head.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dps_model_num_classes(model: *const DpsModel, out: *mut u32) -> DpsStatus {
    if model.is_null() || out.is_null() {
        set_error("null pointer");
        return DpsStatus::NullPointer;
    }
    *out = (*model).inner.num_classes() as u32;
    DpsStatus::Ok
}

/// Loads a dataset file.
///
/// # Safety
/// As `dps_model_load`; release with `dps_dataset_free`.
#[no_mangle]
pub unsafe extern "C" fn dps_dataset_load(
    path: *const c_char,
    out: *mut *mut DpsDataset,
) -> DpsStatus {
    if out.is_null() {
        set_error("out pointer is null");
        return DpsStatus::NullPointer;
    }
    let Some(path) = cstr_arg(path) else {
        set_error("path is null or not UTF-8");
        return DpsStatus::NullPointer;
    };
    match read_dataset(std::path::Path::new(path)) {
        Ok(batch) => {
            *out = Box::into_raw(Box::new(DpsDataset { inner: batch }));
            DpsStatus::Ok
        }
        Err(err) => fail(err),
    }
}

/// # Safety
/// `dataset` must come from `dps_dataset_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dps_dataset_free(dataset: *mut DpsDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of samples in a dataset.
///
/// # Safety
/// `dataset` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dps_dataset_len(dataset: *const DpsDataset, out: *mut u32) -> DpsStatus {
    if dataset.is_null() || out.is_null() {
        set_error("null pointer");
        return DpsStatus::NullPointer;
    }
    *out = (*dataset).inner.len() as u32;
    DpsStatus::Ok
}

/// Extracts one decision pattern per dataset sample, using the ground
/// truth label as the extraction class.
///
/// # Safety
/// `model` and `dataset` must be live handles; `out` must be valid. On
/// success `*out` must be released with `dps_patternset_free`.
#[no_mangle]
pub unsafe extern "C" fn dps_extract_patterns(
    model: *const DpsModel,
    dataset: *const DpsDataset,
    out: *mut *mut DpsPatternSet,
) -> DpsStatus {
    if model.is_null() || dataset.is_null() || out.is_null() {
        set_error("null pointer");
        return DpsStatus::NullPointer;
    }
    match extract_batch(&(*model).inner, &(*dataset).inner) {
        Ok(patterns) => {
            let channels = patterns.first().map_or(0, |p| p.pattern.len());
            *out = Box::into_raw(Box::new(DpsPatternSet { patterns, channels }));
            DpsStatus::Ok
        }
        Err(err) => fail(err),
    }
}

/// # Safety
/// `set` must come from `dps_extract_patterns` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dps_patternset_free(set: *mut DpsPatternSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Number of patterns in the set.
///
/// # Safety
/// `set` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dps_patternset_len(set: *const DpsPatternSet, out: *mut u32) -> DpsStatus {
    if set.is_null() || out.is_null() {
        set_error("null pointer");
        return DpsStatus::NullPointer;
    }
    *out = (*set).patterns.len() as u32;
    DpsStatus::Ok
}

/// Channel count (pattern dimensionality).
///
/// # Safety
/// `set` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dps_patternset_dim(set: *const DpsPatternSet, out: *mut u32) -> DpsStatus {
    if set.is_null() || out.is_null() {
        set_error("null pointer");
        return DpsStatus::NullPointer;
    }
    *out = (*set).channels as u32;
    DpsStatus::Ok
}

/// Copies pattern `index` into `buf` (length `buf_len` doubles; must be at
/// least the pattern dimensionality).
///
/// # Safety
/// `set` must be a live handle; `buf` must point to `buf_len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn dps_patternset_pattern(
    set: *const DpsPatternSet,
    index: u32,
    buf: *mut f64,
    buf_len: usize,
) -> DpsStatus {
    if set.is_null() || buf.is_null() {
        set_error("null pointer");
        return DpsStatus::NullPointer;
    }
    let set = &*set;
    let Some(pattern) = set.patterns.get(index as usize) else {
        set_error("pattern index out of range");
        return DpsStatus::InvalidArgument;
    };
    if buf_len < pattern.pattern.len() {
        set_error("buffer too small for pattern");
        return DpsStatus::InvalidArgument;
    }
    std::ptr::copy_nonoverlapping(pattern.pattern.as_ptr(), buf, pattern.pattern.len());
    DpsStatus::Ok
}

/// Per-pattern metadata: true class, predicted class, extraction-class
/// logit, loss, and whether the pattern is degenerate (zero norm). Any
/// output pointer may be NULL to skip that field.
///
/// # Safety
/// `set` must be a live handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dps_patternset_info(
    set: *const DpsPatternSet,
    index: u32,
    out_true_class: *mut u32,
    out_predicted_class: *mut u32,
    out_logit: *mut f64,
    out_loss: *mut f64,
    out_degenerate: *mut u8,
) -> DpsStatus {
    if set.is_null() {
        set_error("null pointer");
        return DpsStatus::NullPointer;
    }
    let set = &*set;
    let Some(p) = set.patterns.get(index as usize) else {
        set_error("pattern index out of range");
        return DpsStatus::InvalidArgument;
    };
    if !out_true_class.is_null() {
        *out_true_class = p.true_class;
    }
    if !out_predicted_class.is_null() {
        *out_predicted_class = p.predicted_class;
    }
    if !out_logit.is_null() {
        *out_logit = p.logit_true_class;
    }
    if !out_loss.is_null() {
        *out_loss = p.loss;
    }
    if !out_degenerate.is_null() {
        *out_degenerate = u8::from(p.is_degenerate());
    }
    DpsStatus::Ok
}

/// Builds per-class mean references from a (training) pattern set.
/// `num_classes` fixes the class range; every class must have at least one
/// usable pattern.
///
/// # Safety
/// `set` must be a live handle; `out` must be valid. Release `*out` with
/// `dps_referenceset_free`.
#[no_mangle]
pub unsafe extern "C" fn dps_build_references(
    set: *const DpsPatternSet,
    num_classes: u32,
    out: *mut *mut DpsReferenceSet,
) -> DpsStatus {
    if set.is_null() || out.is_null() {
        set_error("null pointer");
        return DpsStatus::NullPointer;
    }
    match class_references(&(*set).patterns, num_classes as usize, Split::Train) {
        Ok((references, _)) => {
            *out = Box::into_raw(Box::new(DpsReferenceSet { references }));
            DpsStatus::Ok
        }
        Err(err) => fail(err),
    }
}

/// # Safety
/// `refs` must come from `dps_build_references` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dps_referenceset_free(refs: *mut DpsReferenceSet) {
    if !refs.is_null() {
        drop(Box::from_raw(refs));
    }
}

/// Shift of one test pattern against its class reference: 1 - cosine, in
/// [0, 2]. Degenerate patterns yield `DPS_STATUS_DEGENERATE`.
///
/// # Safety
/// `set` and `refs` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dps_shift_sample(
    set: *const DpsPatternSet,
    index: u32,
    refs: *const DpsReferenceSet,
    out: *mut f64,
) -> DpsStatus {
    if set.is_null() || refs.is_null() || out.is_null() {
        set_error("null pointer");
        return DpsStatus::NullPointer;
    }
    let set = &*set;
    let refs = &*refs;
    let Some(p) = set.patterns.get(index as usize) else {
        set_error("pattern index out of range");
        return DpsStatus::InvalidArgument;
    };
    let Some(reference) = refs
        .references
        .iter()
        .find(|r| r.class_index == p.class_used)
    else {
        set_error("no reference for the pattern's class");
        return DpsStatus::Incompatible;
    };
    match dps_sample(p, reference) {
        Ok(value) => {
            *out = value;
            DpsStatus::Ok
        }
        Err(err) => fail(err),
    }
}

/// Mean shift over all non-degenerate patterns in the set. Returns the
/// number of skipped degenerate patterns through `out_skipped` (optional).
///
/// # Safety
/// `set` and `refs` must be live handles; `out` must be writable;
/// `out_skipped` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn dps_shift_dataset(
    set: *const DpsPatternSet,
    refs: *const DpsReferenceSet,
    out: *mut f64,
    out_skipped: *mut u32,
) -> DpsStatus {
    if set.is_null() || refs.is_null() || out.is_null() {
        set_error("null pointer");
        return DpsStatus::NullPointer;
    }
    let set = &*set;
    let refs = &*refs;
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut skipped = 0u32;
    for p in &set.patterns {
        if p.is_degenerate() {
            skipped += 1;
            continue;
        }
        let Some(reference) = refs
            .references
            .iter()
            .find(|r| r.class_index == p.class_used)
        else {
            set_error(&format!("no reference for class {}", p.class_used));
            return DpsStatus::Incompatible;
        };
        match dps_sample(p, reference) {
            Ok(value) => {
                sum += value;
                n += 1;
            }
            Err(err) => return fail(err),
        }
    }
    if n == 0 {
        set_error("no usable patterns");
        return DpsStatus::InvalidArgument;
    }
    if !out_skipped.is_null() {
        *out_skipped = skipped;
    }
    *out = sum / n as f64;
    DpsStatus::Ok
}

/// Spatial size (H, W) of the model's attribution target activation, which
/// is also the size of exported saliency maps.
///
/// # Safety
/// `model`, `out_h`, and `out_w` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dps_target_map_size(
    model: *const DpsModel,
    out_h: *mut u32,
    out_w: *mut u32,
) -> DpsStatus {
    if model.is_null() || out_h.is_null() || out_w.is_null() {
        set_error("null pointer");
        return DpsStatus::NullPointer;
    }
    match (*model).inner.target_shape() {
        Ok((_, h, w)) => {
            *out_h = h as u32;
            *out_w = w as u32;
            DpsStatus::Ok
        }
        Err(err) => fail(err),
    }
}

/// Renders the rectified spatial saliency map of one dataset sample for a
/// class into `buf` (row-major H*W doubles; see `dps_target_map_size`).
///
/// # Safety
/// `model` and `dataset` must be live handles; `buf` must point to
/// `buf_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dps_saliency_map(
    model: *const DpsModel,
    dataset: *const DpsDataset,
    sample_index: u32,
    class_index: u32,
    buf: *mut f64,
    buf_len: usize,
) -> DpsStatus {
    if model.is_null() || dataset.is_null() || buf.is_null() {
        set_error("null pointer");
        return DpsStatus::NullPointer;
    }
    let dataset = &(*dataset).inner;
    if sample_index as usize >= dataset.len() {
        set_error("sample index out of range");
        return DpsStatus::InvalidArgument;
    }
    let x = dataset.sample(sample_index as usize);
    match gradcam_map(&(*model).inner, &x, class_index as usize) {
        Ok(map) => {
            if buf_len < map.len() {
                set_error("buffer too small for saliency map");
                return DpsStatus::InvalidArgument;
            }
            std::ptr::copy_nonoverlapping(map.data().as_ptr(), buf, map.len());
            DpsStatus::Ok
        }
        Err(err) => fail(err),
    }
}

/// Cosine similarity of two raw vectors; exposed for binding-side checks.
///
/// # Safety
/// `a` and `b` must point to `len` readable doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dps_cosine(
    a: *const f64,
    b: *const f64,
    len: usize,
    out: *mut f64,
) -> DpsStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        set_error("null pointer");
        return DpsStatus::NullPointer;
    }
    let a = std::slice::from_raw_parts(a, len);
    let b = std::slice::from_raw_parts(b, len);
    match cosine(a, b) {
        Ok(value) => {
            *out = value;
            DpsStatus::Ok
        }
        Err(err) => fail(err),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dps_core::io::{write_checkpoint, write_dataset};
    use dps_core::model::conv_stack;
    use dps_core::synth::{gen_shapes, SyntheticDatasetConfig};
    use dps_core::train::{train, TrainConfig};
    use std::ffi::CString;

    fn write_fixture(dir: &std::path::Path) -> (CString, CString) {
        let cfg = SyntheticDatasetConfig {
            samples_per_class: 6,
            ..Default::default()
        };
        let batch = gen_shapes(&cfg, 5).unwrap();
        let (specs, target) = conv_stack([1, 16, 16], &[4, 8], 3, 4);
        let init = ModelCheckpoint::init([1, 16, 16], specs, target, 7).unwrap();
        let train_cfg = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let (model, _) = train(&init, &batch, &train_cfg).unwrap();
        let model_path = dir.join("model.dpsc");
        let data_path = dir.join("data.dpsd");
        write_checkpoint(&model_path, &model).unwrap();
        write_dataset(&data_path, &batch).unwrap();
        (
            CString::new(model_path.to_str().unwrap()).unwrap(),
            CString::new(data_path.to_str().unwrap()).unwrap(),
        )
    }

    #[test]
    fn full_pipeline_through_the_c_abi() {
        let dir = tempfile::tempdir().unwrap();
        let (model_path, data_path) = write_fixture(dir.path());
        unsafe {
            let mut model: *mut DpsModel = std::ptr::null_mut();
            assert_eq!(
                dps_model_load(model_path.as_ptr(), &mut model),
                DpsStatus::Ok
            );
            let mut classes = 0u32;
            assert_eq!(dps_model_num_classes(model, &mut classes), DpsStatus::Ok);
            assert_eq!(classes, 4);

            let mut dataset: *mut DpsDataset = std::ptr::null_mut();
            assert_eq!(
                dps_dataset_load(data_path.as_ptr(), &mut dataset),
                DpsStatus::Ok
            );
            let mut n = 0u32;
            assert_eq!(dps_dataset_len(dataset, &mut n), DpsStatus::Ok);
            assert_eq!(n, 24);

            let mut set: *mut DpsPatternSet = std::ptr::null_mut();
            assert_eq!(
                dps_extract_patterns(model, dataset, &mut set),
                DpsStatus::Ok
            );
            let mut len = 0u32;
            let mut dim = 0u32;
            assert_eq!(dps_patternset_len(set, &mut len), DpsStatus::Ok);
            assert_eq!(dps_patternset_dim(set, &mut dim), DpsStatus::Ok);
            assert_eq!(len, 24);
            assert_eq!(dim, 8);

            let mut pattern = vec![0.0f64; dim as usize];
            assert_eq!(
                dps_patternset_pattern(set, 0, pattern.as_mut_ptr(), pattern.len()),
                DpsStatus::Ok
            );
            assert!(pattern.iter().any(|&v| v != 0.0));

            let mut true_class = 99u32;
            let mut loss = -1.0f64;
            assert_eq!(
                dps_patternset_info(
                    set,
                    0,
                    &mut true_class,
                    std::ptr::null_mut(),
                    std::ptr::null_mut(),
                    &mut loss,
                    std::ptr::null_mut(),
                ),
                DpsStatus::Ok
            );
            assert_eq!(true_class, 0);
            assert!(loss >= 0.0);

            let mut refs: *mut DpsReferenceSet = std::ptr::null_mut();
            assert_eq!(dps_build_references(set, classes, &mut refs), DpsStatus::Ok);

            let mut shift = -1.0f64;
            assert_eq!(dps_shift_sample(set, 0, refs, &mut shift), DpsStatus::Ok);
            assert!((0.0..=2.0).contains(&shift));

            let mut dataset_shift = -1.0f64;
            let mut skipped = 0u32;
            assert_eq!(
                dps_shift_dataset(set, refs, &mut dataset_shift, &mut skipped),
                DpsStatus::Ok
            );
            assert!((0.0..=2.0).contains(&dataset_shift));

            let mut h = 0u32;
            let mut w = 0u32;
            assert_eq!(dps_target_map_size(model, &mut h, &mut w), DpsStatus::Ok);
            let mut map = vec![-1.0f64; (h * w) as usize];
            assert_eq!(
                dps_saliency_map(model, dataset, 0, 1, map.as_mut_ptr(), map.len()),
                DpsStatus::Ok
            );
            assert!(map.iter().all(|&v| v >= 0.0));

            dps_referenceset_free(refs);
            dps_patternset_free(set);
            dps_dataset_free(dataset);
            dps_model_free(model);
        }
    }

    #[test]
    fn errors_surface_through_status_and_message() {
        unsafe {
            let bad = CString::new("/nonexistent/path.dpsc").unwrap();
            let mut model: *mut DpsModel = std::ptr::null_mut();
            let status = dps_model_load(bad.as_ptr(), &mut model);
            assert_eq!(status, DpsStatus::IoError);
            let mut buf = vec![0i8; 256];
            let len = dps_last_error_message(buf.as_mut_ptr() as *mut c_char, buf.len());
            assert!(len > 0);

            assert_eq!(
                dps_model_load(std::ptr::null(), &mut model),
                DpsStatus::NullPointer
            );
            assert_eq!(
                dps_model_num_classes(std::ptr::null(), std::ptr::null_mut()),
                DpsStatus::NullPointer
            );
        }
    }

    #[test]
    fn cosine_matches_plain_math() {
        unsafe {
            let a = [3.0, 4.0];
            let b = [3.0, 4.0];
            let mut out = 0.0;
            assert_eq!(
                dps_cosine(a.as_ptr(), b.as_ptr(), 2, &mut out),
                DpsStatus::Ok
            );
            assert!((out - 1.0).abs() < 1e-12);

            let zero = [0.0, 0.0];
            assert_eq!(
                dps_cosine(a.as_ptr(), zero.as_ptr(), 2, &mut out),
                DpsStatus::Degenerate
            );
        }
    }

    #[test]
    fn generated_header_declares_the_api() {
        let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("include")
            .join("dps.h");
        let text = std::fs::read_to_string(header).expect("header generated at build time");
        for symbol in [
            "dps_model_load",
            "dps_extract_patterns",
            "dps_shift_dataset",
            "dps_last_error_message",
            "DpsStatus",
        ] {
            assert!(text.contains(symbol), "header misses {symbol}");
        }
    }
}
