//! C ABI over the `prefopt` core.
//!
//! Policies and datasets cross the boundary as opaque handles created and
//! destroyed by this library. Every fallible function returns a
//! [`PrefoptStatus`]; on failure, [`prefopt_last_error_message`] describes
//! the most recent error on the calling thread. Strings returned through
//! out-parameters are owned by the caller and must be released with
//! [`prefopt_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use prefopt::loss::method_loss;
use prefopt::metrics::{correlations, evaluate_report};
use prefopt::optim::{train, NoObserver};
use prefopt::verify::{run_all, VerifyOptions};
use prefopt::{ContextId, Dataset, Error, Method, PolicyTable, TrainConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefoptStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Index = 3,
    Config = 4,
    Argument = 5,
    Domain = 6,
    Parse = 7,
    Validation = 8,
    EmptyDataset = 9,
    Divergence = 10,
    Io = 11,
    Json = 12,
    Panic = 13,
}

/// Opaque tabular softmax policy.
pub struct PrefoptPolicy(PolicyTable);

/// Opaque preference dataset.
pub struct PrefoptDataset(Dataset);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(PrefoptStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Index { .. } => PrefoptStatus::Index,
            Error::Config(_) => PrefoptStatus::Config,
            Error::Argument(_) => PrefoptStatus::Argument,
            Error::Domain(_) => PrefoptStatus::Domain,
            Error::Parse { .. } => PrefoptStatus::Parse,
            Error::Validation { .. } => PrefoptStatus::Validation,
            Error::EmptyDataset => PrefoptStatus::EmptyDataset,
            Error::Divergence { .. } => PrefoptStatus::Divergence,
            Error::Io { .. } => PrefoptStatus::Io,
            Error::Json(_) => PrefoptStatus::Json,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(PrefoptStatus::Json, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PrefoptStatus::NullPointer, format!("{what} is null"))
}

/// Runs `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> PrefoptStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => PrefoptStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            PrefoptStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PrefoptStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|e| Failure(PrefoptStatus::Json, e.to_string()))?;
    write_out(out, c.into_raw(), "string out-pointer")
}

fn context(query: usize, augmented: bool) -> ContextId {
    let x = ContextId::base(query);
    if augmented {
        x.aug()
    } else {
        x
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn prefopt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn prefopt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Uniform policy over `num_queries` base contexts, plus one augmented
/// context per query when `augmented`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prefopt_policy_uniform(
    num_queries: usize,
    num_responses: usize,
    augmented: bool,
    out: *mut *mut PrefoptPolicy,
) -> PrefoptStatus {
    guard(|| {
        let p = PolicyTable::uniform(num_queries, num_responses, augmented)?;
        write_out(out, Box::into_raw(Box::new(PrefoptPolicy(p))), "out")
    })
}

/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prefopt_policy_from_json(json: *const c_char, out: *mut *mut PrefoptPolicy) -> PrefoptStatus {
    guard(|| {
        let p = PolicyTable::from_json(str_arg(json, "json")?)?;
        write_out(out, Box::into_raw(Box::new(PrefoptPolicy(p))), "out")
    })
}

/// # Safety
/// `policy` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prefopt_policy_to_json(policy: *const PrefoptPolicy, out: *mut *mut c_char) -> PrefoptStatus {
    guard(|| {
        let p = handle(policy, "policy")?;
        write_string(out, p.0.to_json()?)
    })
}

/// Destroys a policy handle. Null is ignored.
///
/// # Safety
/// `policy` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn prefopt_policy_free(policy: *mut PrefoptPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// `log pi(response | context)`.
///
/// # Safety
/// `policy` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prefopt_policy_log_prob(
    policy: *const PrefoptPolicy,
    query: usize,
    augmented: bool,
    response: usize,
    out: *mut f64,
) -> PrefoptStatus {
    guard(|| {
        let p = handle(policy, "policy")?;
        write_out(out, p.0.log_prob(context(query, augmented), response)?, "out")
    })
}

/// `beta * [(log pi - log ref)(y_pos) - (log pi - log ref)(y_neg)]`.
///
/// # Safety
/// Handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prefopt_implicit_reward_diff(
    pi: *const PrefoptPolicy,
    reference: *const PrefoptPolicy,
    query: usize,
    augmented: bool,
    y_pos: usize,
    y_neg: usize,
    beta: f64,
    out: *mut f64,
) -> PrefoptStatus {
    guard(|| {
        let (pi, r) = (handle(pi, "pi")?, handle(reference, "reference")?);
        let v = prefopt::policy::implicit_reward_diff(&pi.0, &r.0, context(query, augmented), y_pos, y_neg, beta)?;
        write_out(out, v, "out")
    })
}

/// Parses a JSONL dataset held in memory.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prefopt_dataset_from_jsonl(text: *const c_char, out: *mut *mut PrefoptDataset) -> PrefoptStatus {
    guard(|| {
        let d = Dataset::parse_jsonl(str_arg(text, "text")?)?;
        write_out(out, Box::into_raw(Box::new(PrefoptDataset(d))), "out")
    })
}

/// Reads a JSONL dataset from disk.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prefopt_dataset_load(path: *const c_char, out: *mut *mut PrefoptDataset) -> PrefoptStatus {
    guard(|| {
        let d = prefopt::datagen::load_jsonl(Path::new(str_arg(path, "path")?))?;
        write_out(out, Box::into_raw(Box::new(PrefoptDataset(d))), "out")
    })
}

/// Number of tuples.
///
/// # Safety
/// `dataset` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prefopt_dataset_len(dataset: *const PrefoptDataset, out: *mut usize) -> PrefoptStatus {
    guard(|| write_out(out, handle(dataset, "dataset")?.0.len(), "out"))
}

/// Destroys a dataset handle. Null is ignored.
///
/// # Safety
/// `dataset` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn prefopt_dataset_free(dataset: *mut PrefoptDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Mean loss of `method` ("dpo", "ipo", "sr-dpo", "sr-ipo") over the whole
/// dataset. When `gradient` is non-null it receives the gradient with
/// respect to `pi`'s logits; `gradient_len` must then equal the number of
/// logits. Refinements are detached, as in training.
///
/// # Safety
/// Handles must be live; `gradient` must hold `gradient_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn prefopt_loss(
    pi: *const PrefoptPolicy,
    reference: *const PrefoptPolicy,
    dataset: *const PrefoptDataset,
    method: *const c_char,
    beta: f64,
    lambda: f64,
    loss: *mut f64,
    gradient: *mut f64,
    gradient_len: usize,
) -> PrefoptStatus {
    guard(|| {
        let (pi, r, d) = (handle(pi, "pi")?, handle(reference, "reference")?, handle(dataset, "dataset")?);
        let method: Method = str_arg(method, "method")?.parse()?;
        let result = method_loss(method, &pi.0, &r.0, &d.0.tuples, beta, lambda)?;
        if !gradient.is_null() {
            if gradient_len != result.gradient.len() {
                return Err(Error::Argument(format!(
                    "gradient buffer holds {gradient_len} values, policy has {}",
                    result.gradient.len()
                ))
                .into());
            }
            std::slice::from_raw_parts_mut(gradient, gradient_len).copy_from_slice(&result.gradient);
        }
        write_out(loss, result.loss, "loss")
    })
}

/// Trains from `init` (or a copy of `reference` when null) using a JSON
/// training config; fields left out take their defaults. Returns the
/// trained policy and the final metrics as JSON.
///
/// # Safety
/// Handles must be live (`init` may be null); out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prefopt_train(
    config_json: *const c_char,
    dataset: *const PrefoptDataset,
    reference: *const PrefoptPolicy,
    init: *const PrefoptPolicy,
    out_policy: *mut *mut PrefoptPolicy,
    out_metrics_json: *mut *mut c_char,
) -> PrefoptStatus {
    guard(|| {
        let config: TrainConfig = serde_json::from_str(str_arg(config_json, "config_json")?)?;
        let (d, r) = (handle(dataset, "dataset")?, handle(reference, "reference")?);
        let init = init.as_ref().map(|p| &p.0);
        if out_policy.is_null() || out_metrics_json.is_null() {
            return Err(null("out-pointer"));
        }
        let mut frozen = r.0.clone();
        frozen.set_trainable(false);
        let state = train(&config, &d.0, &frozen, init, config.steps.max(1), &mut NoObserver)?;
        let metrics = evaluate_report(&state.policy, &frozen, &d.0)?;
        write_string(out_metrics_json, serde_json::to_string(&metrics)?)?;
        write_out(out_policy, Box::into_raw(Box::new(PrefoptPolicy(state.policy))), "out_policy")
    })
}

/// Metrics report of `pi` on `dataset` as JSON.
///
/// # Safety
/// Handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prefopt_metrics_json(
    pi: *const PrefoptPolicy,
    reference: *const PrefoptPolicy,
    dataset: *const PrefoptDataset,
    out: *mut *mut c_char,
) -> PrefoptStatus {
    guard(|| {
        let (pi, r, d) = (handle(pi, "pi")?, handle(reference, "reference")?, handle(dataset, "dataset")?);
        write_string(out, serde_json::to_string(&evaluate_report(&pi.0, &r.0, &d.0)?)?)
    })
}

/// Pearson, Spearman and Kendall tau-b of two equal-length arrays. An
/// undefined coefficient is reported as NaN.
///
/// # Safety
/// `x` and `y` must each hold `len` doubles; out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prefopt_correlations(
    x: *const f64,
    y: *const f64,
    len: usize,
    pearson: *mut f64,
    spearman: *mut f64,
    kendall_tau: *mut f64,
) -> PrefoptStatus {
    guard(|| {
        if x.is_null() || y.is_null() {
            return Err(null("input array"));
        }
        let c = correlations(std::slice::from_raw_parts(x, len), std::slice::from_raw_parts(y, len))?;
        write_out(pearson, c.pearson.unwrap_or(f64::NAN), "pearson")?;
        write_out(spearman, c.spearman.unwrap_or(f64::NAN), "spearman")?;
        write_out(kendall_tau, c.kendall_tau.unwrap_or(f64::NAN), "kendall_tau")
    })
}

/// Runs every registered check. `passed` reports the overall verdict and
/// `out_report_json` the full report. A failing check is not an error.
///
/// # Safety
/// Out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn prefopt_verify(seed: u64, passed: *mut bool, out_report_json: *mut *mut c_char) -> PrefoptStatus {
    guard(|| {
        let report = run_all(&VerifyOptions { seed, fault: None })?;
        write_out(passed, report.passed, "passed")?;
        write_string(out_report_json, serde_json::to_string(&report)?)
    })
}
