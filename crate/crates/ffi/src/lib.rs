//! C ABI for the fdkt pipeline.
//!
//! Conventions: constructors return an opaque handle or null on failure;
//! fallible operations return an [`FdktStatus`] code and write results
//! through out-pointers. After any failure, `fdkt_last_error_message`
//! returns a thread-local description valid until the next failing call on
//! the same thread. Strings returned by the library are freed with
//! `fdkt_string_free`, handles with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::sync::Arc;

use libc::c_char;

use fdkt_core::corpus::{load_jsonl, save_jsonl, Dataset, TaskSpec};
use fdkt_core::dp::{calibrate_sigma, rdp_epsilon, DpConfig};
use fdkt_core::evalkit::extract_label;
use fdkt_core::lm::{decode, DecodeParams, TinyLM};

/// Result codes for every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdktStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// File could not be read or written.
    Io = 3,
    /// File contents could not be parsed.
    Parse = 4,
    /// The operation's domain rules rejected the input.
    Domain = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let message = message.into();
    let cstring = CString::new(message.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error message contained NUL").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(cstring));
}

/// Message describing the most recent failure on this thread, or null when
/// no failure has occurred. The pointer stays valid until the next failing
/// call on the same thread.
#[no_mangle]
pub extern "C" fn fdkt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map(|s| s.as_ptr())
            .unwrap_or(std::ptr::null())
    })
}

/// Library version as a static string; never freed by the caller.
#[no_mangle]
pub extern "C" fn fdkt_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Frees a string previously returned by this library.
///
/// # Safety
/// `s` must have been returned by an fdkt function and not freed before.
#[no_mangle]
pub unsafe extern "C" fn fdkt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, FdktStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(FdktStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        FdktStatus::InvalidUtf8
    })
}

unsafe fn read_path(ptr: *const c_char) -> Result<PathBuf, FdktStatus> {
    Ok(PathBuf::from(read_str(ptr)?))
}

fn give_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("NUL bytes stripped")
        .into_raw()
}

// ---------------------------------------------------------------------------
// Privacy accountant
// ---------------------------------------------------------------------------

/// Total (epsilon, delta)-DP cost of `steps` subsampled-Gaussian steps.
///
/// # Safety
/// `out_epsilon` must point to writable memory for one f64.
#[no_mangle]
pub unsafe extern "C" fn fdkt_rdp_epsilon(
    noise_multiplier: f64,
    sample_rate: f64,
    steps: u64,
    delta: f64,
    out_epsilon: *mut f64,
) -> FdktStatus {
    if out_epsilon.is_null() {
        set_error("out_epsilon is null");
        return FdktStatus::NullArgument;
    }
    let config = DpConfig {
        clip_norm: 1.0,
        noise_multiplier,
        sample_rate,
        steps,
        target_delta: delta,
        seed: 0,
    };
    match rdp_epsilon(&config) {
        Ok(epsilon) => {
            *out_epsilon = epsilon;
            FdktStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            FdktStatus::Domain
        }
    }
}

/// Smallest noise multiplier realizing at most `target_epsilon`.
///
/// # Safety
/// `out_sigma` must point to writable memory for one f64.
#[no_mangle]
pub unsafe extern "C" fn fdkt_calibrate_sigma(
    target_epsilon: f64,
    sample_rate: f64,
    steps: u64,
    delta: f64,
    out_sigma: *mut f64,
) -> FdktStatus {
    if out_sigma.is_null() {
        set_error("out_sigma is null");
        return FdktStatus::NullArgument;
    }
    match calibrate_sigma(target_epsilon, sample_rate, steps, delta) {
        Ok(sigma) => {
            *out_sigma = sigma;
            FdktStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            FdktStatus::Domain
        }
    }
}

// ---------------------------------------------------------------------------
// Task handles
// ---------------------------------------------------------------------------

/// Opaque task description handle.
pub struct FdktTask {
    inner: Arc<TaskSpec>,
}

/// Loads a task spec from its JSON sidecar file. Returns null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fdkt_task_load_json(path: *const c_char) -> *mut FdktTask {
    let Ok(path) = read_path(path) else {
        return std::ptr::null_mut();
    };
    match TaskSpec::load_json(&path) {
        Ok(task) => Box::into_raw(Box::new(FdktTask {
            inner: Arc::new(task),
        })),
        Err(e) => {
            set_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `task` must come from `fdkt_task_load_json` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fdkt_task_free(task: *mut FdktTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// Number of labels in the task's label set; 0 for a null handle.
///
/// # Safety
/// `task` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fdkt_task_label_count(task: *const FdktTask) -> usize {
    task.as_ref().map(|t| t.inner.label_set.len()).unwrap_or(0)
}

/// Extracts the predicted label from generated text (first in-set integer,
/// then label names). `FdktStatus::Domain` means extraction failure, which
/// evaluation counts as an incorrect prediction.
///
/// # Safety
/// All pointers must be valid; `out_label` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fdkt_extract_label(
    task: *const FdktTask,
    text: *const c_char,
    out_label: *mut u32,
) -> FdktStatus {
    let Some(task) = task.as_ref() else {
        set_error("task handle is null");
        return FdktStatus::NullArgument;
    };
    if out_label.is_null() {
        set_error("out_label is null");
        return FdktStatus::NullArgument;
    }
    let text = match read_str(text) {
        Ok(t) => t,
        Err(status) => return status,
    };
    match extract_label(text, &task.inner) {
        Some(label) => {
            *out_label = label;
            FdktStatus::Ok
        }
        None => {
            set_error("no label could be extracted");
            FdktStatus::Domain
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset handles
// ---------------------------------------------------------------------------

/// Opaque dataset handle.
pub struct FdktDataset {
    inner: Dataset,
}

/// Loads a JSONL dataset under the given task. Returns null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `task` a live handle.
#[no_mangle]
pub unsafe extern "C" fn fdkt_dataset_load_jsonl(
    path: *const c_char,
    task: *const FdktTask,
) -> *mut FdktDataset {
    let Some(task) = task.as_ref() else {
        set_error("task handle is null");
        return std::ptr::null_mut();
    };
    let Ok(path) = read_path(path) else {
        return std::ptr::null_mut();
    };
    match load_jsonl(&path, Arc::clone(&task.inner)) {
        Ok(dataset) => Box::into_raw(Box::new(FdktDataset { inner: dataset })),
        Err(e) => {
            set_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `dataset` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fdkt_dataset_free(dataset: *mut FdktDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fdkt_dataset_len(dataset: *const FdktDataset) -> usize {
    dataset.as_ref().map(|d| d.inner.len()).unwrap_or(0)
}

/// Copies record `index`'s text; caller frees with `fdkt_string_free`.
/// Returns null when the index is out of range.
///
/// # Safety
/// `dataset` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fdkt_dataset_text(
    dataset: *const FdktDataset,
    index: usize,
) -> *mut c_char {
    let Some(dataset) = dataset.as_ref() else {
        set_error("dataset handle is null");
        return std::ptr::null_mut();
    };
    match dataset.inner.get(index) {
        Some(record) => give_string(record.text.clone()),
        None => {
            set_error(format!(
                "index {index} out of range ({} records)",
                dataset.inner.len()
            ));
            std::ptr::null_mut()
        }
    }
}

/// Reads record `index`'s label.
///
/// # Safety
/// Pointers must be valid; `out_label` writable.
#[no_mangle]
pub unsafe extern "C" fn fdkt_dataset_label(
    dataset: *const FdktDataset,
    index: usize,
    out_label: *mut u32,
) -> FdktStatus {
    let Some(dataset) = dataset.as_ref() else {
        set_error("dataset handle is null");
        return FdktStatus::NullArgument;
    };
    if out_label.is_null() {
        set_error("out_label is null");
        return FdktStatus::NullArgument;
    }
    match dataset.inner.get(index) {
        Some(record) => {
            *out_label = record.label;
            FdktStatus::Ok
        }
        None => {
            set_error(format!(
                "index {index} out of range ({} records)",
                dataset.inner.len()
            ));
            FdktStatus::Domain
        }
    }
}

/// Writes the dataset back out as JSONL.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fdkt_dataset_save_jsonl(
    dataset: *const FdktDataset,
    path: *const c_char,
) -> FdktStatus {
    let Some(dataset) = dataset.as_ref() else {
        set_error("dataset handle is null");
        return FdktStatus::NullArgument;
    };
    let path = match read_path(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match save_jsonl(&dataset.inner, &path) {
        Ok(()) => FdktStatus::Ok,
        Err(e) => {
            set_error(e.to_string());
            FdktStatus::Io
        }
    }
}

// ---------------------------------------------------------------------------
// Model handles
// ---------------------------------------------------------------------------

/// Opaque language-model handle.
pub struct FdktModel {
    inner: TinyLM,
}

/// Loads a model checkpoint. Returns null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fdkt_model_load(path: *const c_char) -> *mut FdktModel {
    let Ok(path) = read_path(path) else {
        return std::ptr::null_mut();
    };
    match TinyLM::load(&path) {
        Ok(model) => Box::into_raw(Box::new(FdktModel { inner: model })),
        Err(e) => {
            set_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `model` must come from `fdkt_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fdkt_model_free(model: *mut FdktModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fdkt_model_param_count(model: *const FdktModel) -> usize {
    model.as_ref().map(|m| m.inner.param_count()).unwrap_or(0)
}

/// Greedy-decodes a continuation of `prompt`; caller frees the result with
/// `fdkt_string_free`.
///
/// # Safety
/// Pointers must be valid; `out_text` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fdkt_model_greedy_decode(
    model: *const FdktModel,
    prompt: *const c_char,
    max_tokens: usize,
    out_text: *mut *mut c_char,
) -> FdktStatus {
    let Some(model) = model.as_ref() else {
        set_error("model handle is null");
        return FdktStatus::NullArgument;
    };
    if out_text.is_null() {
        set_error("out_text is null");
        return FdktStatus::NullArgument;
    }
    let prompt = match read_str(prompt) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match decode(&model.inner, prompt, &DecodeParams::greedy(max_tokens.max(1))) {
        Ok(text) => {
            *out_text = give_string(text);
            FdktStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            FdktStatus::Domain
        }
    }
}
