// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over `nxl-core`.
//!
//! Models are opaque handles created by `nxl_model_load*` and released with
//! `nxl_model_free`. Every fallible call returns an [`NxlStatus`]; on failure
//! `nxl_last_error` describes the most recent error on the calling thread.
//! Panics never cross the boundary; they surface as `NXL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nxl_core::attribution::{self, AttributionRequest, GradientObjective, IgBaseline, Method, DEFAULT_IG_STEPS};
use nxl_core::error::ErrorCategory;
use nxl_core::evaluation::{average_precision, dot_alignment, EvidenceVector};
use nxl_core::model::{self, ModelSnapshot, Prediction, Task, TokenSequence};
use nxl_core::NxlError;

/// Result of every fallible call. Codes 2..=5 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NxlStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Fixture = 5,
    /// The output buffer is shorter than the sequence.
    BufferTooSmall = 6,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 7,
    /// Internal panic; the library state is unaffected but the call failed.
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NxlTask {
    Classification = 0,
    Regression = 1,
    MaskedLm = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NxlMethod {
    L2norm = 0,
    Logat = 1,
    Normxlogit = 2,
    GradNorm = 3,
    GradXInput = 4,
    IntegratedGradients = 5,
    Random = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NxlObjective {
    Logit = 0,
    Probability = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NxlIgBaseline {
    TokenZero = 0,
    AllZero = 1,
}

/// Model hyperparameters.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NxlModelInfo {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    pub has_classification_head: bool,
    pub has_regression_head: bool,
    pub has_language_model_head: bool,
}

/// Options for `nxl_attribute`; start from `nxl_attribution_options_default`.
/// Negative `target_label` / `layer` select the defaults (the predicted
/// label, the last layer). `mask_position` is required for masked-LM
/// targets and ignored when negative. Enum fields must hold one of the
/// declared values.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NxlAttributionOptions {
    pub method: NxlMethod,
    pub task: NxlTask,
    pub mask_position: i64,
    pub target_label: i64,
    pub layer: i64,
    pub ig_steps: usize,
    pub ig_baseline: NxlIgBaseline,
    pub objective: NxlObjective,
    pub seed: u64,
}

/// Opaque model handle.
pub struct NxlModel {
    snapshot: ModelSnapshot,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &NxlError) -> NxlStatus {
    match err.category() {
        ErrorCategory::Config => NxlStatus::Config,
        ErrorCategory::Data => NxlStatus::Data,
        ErrorCategory::Numeric => NxlStatus::Numeric,
        ErrorCategory::Fixture => NxlStatus::Fixture,
    }
}

struct Failure(NxlStatus, String);

impl From<NxlError> for Failure {
    fn from(err: NxlError) -> Self {
        Failure(status_of(&err), err.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(NxlStatus::NullArgument, format!("{what} is null"))
}

/// Runs `body`, recording any failure (or panic) as the thread's last error.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> NxlStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => NxlStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            NxlStatus::Panic
        }
    }
}

fn task_of(task: NxlTask) -> Task {
    match task {
        NxlTask::Classification => Task::Classification,
        NxlTask::Regression => Task::Regression,
        NxlTask::MaskedLm => Task::MaskedLm,
    }
}

fn method_of(method: NxlMethod) -> Method {
    match method {
        NxlMethod::L2norm => Method::L2norm,
        NxlMethod::Logat => Method::Logat,
        NxlMethod::Normxlogit => Method::Normxlogit,
        NxlMethod::GradNorm => Method::GradNorm,
        NxlMethod::GradXInput => Method::GradXInput,
        NxlMethod::IntegratedGradients => Method::IntegratedGradients,
        NxlMethod::Random => Method::Random,
    }
}

fn optional(v: i64) -> Option<usize> {
    usize::try_from(v).ok()
}

/// # Safety
/// `ptr` must be null or point to `len` readable elements.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `tokens` must point to `n` readable values.
unsafe fn sequence(tokens: *const u32, n: usize, mask_position: i64) -> Result<TokenSequence, Failure> {
    let ids = slice(tokens, n, "tokens")?.iter().map(|&t| t as usize).collect();
    let seq = TokenSequence::new(ids, [])?;
    Ok(match optional(mask_position) {
        Some(p) => seq.with_mask_position(p)?,
        None => seq,
    })
}

/// # Safety
/// `model` must be null or a live handle from this library.
unsafe fn model_ref<'a>(model: *const NxlModel) -> Result<&'a NxlModel, Failure> {
    model.as_ref().ok_or_else(|| null("model"))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nxl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nxl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model file written by `nxl gen-model`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nxl_model_load(path: *const c_char, out: *mut *mut NxlModel) -> NxlStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|e| Failure(NxlStatus::InvalidUtf8, format!("path: {e}")))?;
        let snapshot = ModelSnapshot::load(path)?;
        *out = Box::into_raw(Box::new(NxlModel { snapshot }));
        Ok(())
    })
}

/// Loads a model from the bytes of a model file.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nxl_model_load_json(bytes: *const u8, len: usize, out: *mut *mut NxlModel) -> NxlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let snapshot = ModelSnapshot::from_json_bytes(slice(bytes, len, "bytes")?)?;
        *out = Box::into_raw(Box::new(NxlModel { snapshot }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nxl_model_free(model: *mut NxlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nxl_model_info(model: *const NxlModel, out: *mut NxlModelInfo) -> NxlStatus {
    guard(|| {
        let m = &model_ref(model)?.snapshot;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = &m.config;
        *out = NxlModelInfo {
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_model: c.d_model,
            d_ff: c.d_ff,
            vocab_size: c.vocab_size,
            max_seq_len: c.max_seq_len,
            n_classes: c.n_classes,
            has_classification_head: m.has_head(Task::Classification),
            has_regression_head: m.has_head(Task::Regression),
            has_language_model_head: m.has_head(Task::MaskedLm),
        };
        Ok(())
    })
}

/// Model prediction. For classification and masked LM `out_label` receives
/// the argmax class / token and `out_value` its probability; for regression
/// `out_label` is untouched and `out_value` receives the output.
///
/// # Safety
/// `model` must be a live handle, `tokens` must point to `n` values and the
/// output pointers must be writable (`out_label` may be null).
#[no_mangle]
pub unsafe extern "C" fn nxl_predict(
    model: *const NxlModel,
    tokens: *const u32,
    n: usize,
    mask_position: i64,
    task: NxlTask,
    out_label: *mut usize,
    out_value: *mut f64,
) -> NxlStatus {
    guard(|| {
        let m = &model_ref(model)?.snapshot;
        let seq = sequence(tokens, n, mask_position)?;
        let out_value = out_value.as_mut().ok_or_else(|| null("out_value"))?;
        match model::predict(m, &seq, task_of(task))? {
            Prediction::Score(s) => *out_value = s,
            p => {
                let label = p.label().expect("label prediction");
                *out_value = p.probability_of(label).expect("label probability");
                if let Some(out) = out_label.as_mut() {
                    *out = label;
                }
            }
        }
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn nxl_attribution_options_default() -> NxlAttributionOptions {
    NxlAttributionOptions {
        method: NxlMethod::Normxlogit,
        task: NxlTask::Classification,
        mask_position: -1,
        target_label: -1,
        layer: -1,
        ig_steps: DEFAULT_IG_STEPS,
        ig_baseline: NxlIgBaseline::TokenZero,
        objective: NxlObjective::Logit,
        seed: 0,
    }
}

/// Per-token scores written to `out_scores[0..n]`.
///
/// # Safety
/// `model` must be a live handle, `tokens` must point to `n` values,
/// `options` must be readable and `out_scores` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn nxl_attribute(
    model: *const NxlModel,
    tokens: *const u32,
    n: usize,
    options: *const NxlAttributionOptions,
    out_scores: *mut f64,
    out_len: usize,
) -> NxlStatus {
    guard(|| {
        let m = &model_ref(model)?.snapshot;
        let o = options.as_ref().ok_or_else(|| null("options"))?;
        let seq = sequence(tokens, n, o.mask_position)?;
        if out_scores.is_null() {
            return Err(null("out_scores"));
        }
        if out_len < n {
            return Err(Failure(
                NxlStatus::BufferTooSmall,
                format!("output buffer holds {out_len} scores, sequence has {n}"),
            ));
        }
        let mut request = AttributionRequest::new(method_of(o.method), task_of(o.task));
        request.target_label = optional(o.target_label);
        request.layer = optional(o.layer);
        request.params.ig_steps = o.ig_steps;
        request.params.ig_baseline = match o.ig_baseline {
            NxlIgBaseline::TokenZero => IgBaseline::TokenZero,
            NxlIgBaseline::AllZero => IgBaseline::AllZero,
        };
        request.params.objective = match o.objective {
            NxlObjective::Logit => GradientObjective::Logit,
            NxlObjective::Probability => GradientObjective::Probability,
        };
        request.seed = o.seed;
        let result = attribution::attribute(m, &seq, &request)?;
        std::slice::from_raw_parts_mut(out_scores, n).copy_from_slice(&result.scores);
        Ok(())
    })
}

fn evidence_of(evidence: &[u8]) -> Result<EvidenceVector, Failure> {
    if evidence.iter().any(|&b| b > 1) {
        return Err(Failure(NxlStatus::Config, "evidence entries must be 0 or 1".into()));
    }
    Ok(EvidenceVector::new(evidence.iter().map(|&b| b == 1).collect()))
}

/// Average precision of `scores` against a 0/1 `evidence` vector.
///
/// # Safety
/// `scores` and `evidence` must point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nxl_average_precision(
    scores: *const f64,
    evidence: *const u8,
    n: usize,
    out: *mut f64,
) -> NxlStatus {
    guard(|| {
        let e = evidence_of(slice(evidence, n, "evidence")?)?;
        let value = average_precision(&e, slice(scores, n, "scores")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = value;
        Ok(())
    })
}

/// Dot product of `evidence` with L1-normalised `|scores|`.
///
/// # Safety
/// `scores` and `evidence` must point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nxl_dot_alignment(
    scores: *const f64,
    evidence: *const u8,
    n: usize,
    out: *mut f64,
) -> NxlStatus {
    guard(|| {
        let e = evidence_of(slice(evidence, n, "evidence")?)?;
        let value = dot_alignment(&e, slice(scores, n, "scores")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = value;
        Ok(())
    })
}
