//! C ABI over the learned-update-rule engine: opaque handles, integer
//! status codes, and a thread-local last-error message. Every entry point
//! catches panics and never unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use libc::{c_char, c_double, size_t};

use metaplast_core::base_model::{Activation, ArchSpec};
use metaplast_core::checkpoint::{load_rule_params, save_rule_params};
use metaplast_core::config::RunConfig;
use metaplast_core::rollout::{rollout, RolloutConfig};
use metaplast_core::tasks::{AugmentParams, TaskSource, TaskSpec};
use metaplast_core::trainer::train_sequential;
use metaplast_core::update_rule::UpdateRuleParams;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpStatus {
    MpOk = 0,
    MpErrNullArgument = 1,
    MpErrInvalidUtf8 = 2,
    MpErrInvalidArgument = 3,
    MpErrIo = 4,
    MpErrRuntime = 5,
    MpErrPanic = 6,
}

/// Task families exposed over the ABI.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpTaskKind {
    MpTaskTwoMoons = 0,
    MpTaskGlyphs = 1,
}

/// Opaque handle to trained or initialized rule parameters.
pub struct MpRuleParams {
    theta: UpdateRuleParams,
    profile: String,
    embed_dim: usize,
}

/// Summary statistics of one rollout.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MpRolloutSummary {
    /// Few-shot probe accuracy before any update.
    pub accuracy_start: c_double,
    /// Few-shot probe accuracy after the final update.
    pub accuracy_end: c_double,
    /// Meta-objective (lower is better) after the final update.
    pub objective_end: c_double,
    /// Inner updates applied.
    pub steps: size_t,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn fail(code: MpStatus, msg: impl AsRef<str>) -> MpStatus {
    set_error(msg.as_ref());
    code
}

fn status_of(err: &metaplast_core::Error) -> MpStatus {
    use metaplast_core::Error as E;
    match err {
        E::Io(_) => MpStatus::MpErrIo,
        E::Config(_) | E::Task(_) | E::Idx(_) => MpStatus::MpErrInvalidArgument,
        _ => MpStatus::MpErrRuntime,
    }
}

fn guard(f: impl FnOnce() -> MpStatus) -> MpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(MpStatus::MpErrPanic, "internal panic"),
    }
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, MpStatus> {
    if ptr.is_null() {
        return Err(MpStatus::MpErrNullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| MpStatus::MpErrInvalidUtf8)
}

/// Copy the last error message (NUL-terminated) into `buf` of capacity
/// `cap`; returns the full message length excluding the NUL. Safe to call
/// with a null or too-small buffer to query the needed size.
#[no_mangle]
pub unsafe extern "C" fn mp_last_error(buf: *mut c_char, cap: size_t) -> size_t {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap as usize >= bytes.len() {
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, bytes.len());
        }
        bytes.len() - 1
    })
}

/// Initialize fresh rule parameters for a named profile ("desk" or "full").
/// Returns null on error; consult mp_last_error.
#[no_mangle]
pub unsafe extern "C" fn mp_rule_params_init(
    profile: *const c_char,
    seed: u64,
) -> *mut MpRuleParams {
    let mut out: *mut MpRuleParams = ptr::null_mut();
    guard(|| {
        let profile = match cstr_arg(profile) {
            Ok(p) => p,
            Err(code) => return fail(code, "profile is null or not UTF-8"),
        };
        let run = match RunConfig::from_profile(profile) {
            Ok(r) => r,
            Err(e) => return fail(status_of(&e), e.to_string()),
        };
        match UpdateRuleParams::init(&run.trainer.rule, seed) {
            Ok(theta) => {
                out = Box::into_raw(Box::new(MpRuleParams {
                    theta,
                    profile: profile.to_string(),
                    embed_dim: run.trainer.embed_dim,
                }));
                MpStatus::MpOk
            }
            Err(e) => fail(MpStatus::MpErrRuntime, e.to_string()),
        }
    });
    out
}

/// Load rule parameters from a checkpoint file. Returns null on error.
#[no_mangle]
pub unsafe extern "C" fn mp_rule_params_load(path: *const c_char) -> *mut MpRuleParams {
    let mut out: *mut MpRuleParams = ptr::null_mut();
    guard(|| {
        let path = match cstr_arg(path) {
            Ok(p) => p,
            Err(code) => return fail(code, "path is null or not UTF-8"),
        };
        match load_rule_params(Path::new(path)) {
            Ok((profile, theta)) => {
                let embed_dim = RunConfig::from_profile(&profile)
                    .map(|r| r.trainer.embed_dim)
                    .unwrap_or(16);
                out = Box::into_raw(Box::new(MpRuleParams { theta, profile, embed_dim }));
                MpStatus::MpOk
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    });
    out
}

/// Save rule parameters to a checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn mp_rule_params_save(
    handle: *const MpRuleParams,
    path: *const c_char,
) -> MpStatus {
    guard(|| {
        let Some(h) = handle.as_ref() else {
            return fail(MpStatus::MpErrNullArgument, "handle is null");
        };
        let path = match cstr_arg(path) {
            Ok(p) => p,
            Err(code) => return fail(code, "path is null or not UTF-8"),
        };
        match save_rule_params(Path::new(path), &h.profile, &h.theta) {
            Ok(()) => MpStatus::MpOk,
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Release a handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn mp_rule_params_free(handle: *mut MpRuleParams) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of learnable tensors in the rule.
#[no_mangle]
pub unsafe extern "C" fn mp_rule_params_tensor_count(handle: *const MpRuleParams) -> size_t {
    match handle.as_ref() {
        Some(h) => h.theta.named().len(),
        None => 0,
    }
}

/// Meta-train from scratch with the profile defaults, sequentially, and
/// return the resulting rule. Returns null on error.
#[no_mangle]
pub unsafe extern "C" fn mp_meta_train(
    profile: *const c_char,
    seed: u64,
    meta_steps: u64,
) -> *mut MpRuleParams {
    let mut out: *mut MpRuleParams = ptr::null_mut();
    guard(|| {
        let profile = match cstr_arg(profile) {
            Ok(p) => p,
            Err(code) => return fail(code, "profile is null or not UTF-8"),
        };
        let run = match RunConfig::from_profile(profile) {
            Ok(r) => r,
            Err(e) => return fail(status_of(&e), e.to_string()),
        };
        match train_sequential(&run.trainer, seed, meta_steps, None) {
            Ok(t) => {
                out = Box::into_raw(Box::new(MpRuleParams {
                    theta: t.theta,
                    profile: profile.to_string(),
                    embed_dim: run.trainer.embed_dim,
                }));
                MpStatus::MpOk
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    });
    out
}

/// Apply the rule to a freshly initialized model on one task and report
/// before/after few-shot accuracy. `hidden_dim` sets the single hidden
/// layer's width.
#[no_mangle]
pub unsafe extern "C" fn mp_rollout(
    handle: *const MpRuleParams,
    task_kind: MpTaskKind,
    task_seed: u64,
    hidden_dim: size_t,
    steps: size_t,
    seed: u64,
    summary: *mut MpRolloutSummary,
) -> MpStatus {
    guard(|| {
        let Some(h) = handle.as_ref() else {
            return fail(MpStatus::MpErrNullArgument, "handle is null");
        };
        let Some(out) = summary.as_mut() else {
            return fail(MpStatus::MpErrNullArgument, "summary is null");
        };
        if hidden_dim == 0 {
            return fail(MpStatus::MpErrInvalidArgument, "hidden_dim must be >= 1");
        }
        let task = match task_kind {
            MpTaskKind::MpTaskTwoMoons => TaskSpec {
                source: TaskSource::TwoMoons { noise_std: 0.1 },
                n_classes: 2,
                input_dim: 2,
                permutation: vec![0, 1],
                augmentation: AugmentParams::none(),
                seed: task_seed,
            },
            MpTaskKind::MpTaskGlyphs => {
                let grid = 8;
                TaskSpec {
                    source: TaskSource::Glyphs { grid },
                    n_classes: 4,
                    input_dim: grid * grid,
                    permutation: (0..grid * grid).collect(),
                    augmentation: AugmentParams::none(),
                    seed: task_seed,
                }
            }
        };
        let arch = match ArchSpec::new(
            vec![task.input_dim, hidden_dim, h.embed_dim],
            Activation::Relu,
        ) {
            Ok(a) => a,
            Err(e) => return fail(MpStatus::MpErrInvalidArgument, e.to_string()),
        };
        let mut cfg = RolloutConfig::default();
        cfg.steps = steps;
        cfg.eval_every = steps.max(1);
        match rollout(&h.theta, &arch, &task, &cfg, seed) {
            Ok(r) => {
                let first = &r.series.rows[0];
                let last = r.series.rows.last().unwrap();
                *out = MpRolloutSummary {
                    accuracy_start: first.few_shot_accuracy,
                    accuracy_end: last.few_shot_accuracy,
                    objective_end: last.meta_objective,
                    steps,
                };
                MpStatus::MpOk
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}
