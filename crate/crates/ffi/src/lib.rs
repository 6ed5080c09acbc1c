//! C interface to the modbench library.
//!
//! Objects are opaque handles created by `*_new` (or `mb_model_load`) and
//! released by the matching `*_free`. Every fallible call returns an
//! [`MbStatus`]; on failure a description is available from
//! [`mb_last_error`] on the same thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use modbench::metrics::{self, ActivationStats, MetricReport};
use modbench::rulegen::{sample_task, Family, Mode, Shift, TaskOptions, TaskSpec};
use modbench::train::{evaluate, train, TrainConfig};
use modbench::zoo::{load_checkpoint, save_checkpoint, Level, Model, ModelConfig};
use modbench::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Domain = 4,
    Unsupported = 5,
    Config = 6,
    Io = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MbFamily {
    Mlp = 0,
    Mha = 1,
    Rnn = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MbMode {
    Classification = 0,
    Regression = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MbLevel {
    GtModular = 0,
    ModularOp = 1,
    Modular = 2,
    Monolithic = 3,
    RandomGate = 4,
}

/// Metric suite of one set of activation statistics.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MbMetricReport {
    pub collapse_avg: f64,
    pub collapse_worst: f64,
    pub alignment: f64,
    pub inverse_mutual_information: f64,
}

/// Training settings. Fill with [`mb_train_options_default`] and adjust.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MbTrainOptions {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Gradient-norm clip; zero disables it. Only RNN tasks accept clipping.
    pub clip_norm: f64,
    pub eval_every: usize,
    pub eval_samples: usize,
}

pub struct MbTask(TaskSpec);
pub struct MbModel(Model);
pub struct MbStats(ActivationStats);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(MbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => MbStatus::Shape,
            Error::Domain { .. } | Error::Diverged { .. } => MbStatus::Domain,
            Error::InvalidArgument(_) => MbStatus::InvalidArgument,
            Error::Unsupported(_) => MbStatus::Unsupported,
            Error::Config(_) => MbStatus::Config,
            Error::Io(_) | Error::Json(_) => MbStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MbStatus::InvalidArgument, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MbStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            MbStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(MbStatus::NullPointer, format!("{what} is null")))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(MbStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(MbStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure(MbStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(MbStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    *borrow_mut(out, what)? = value;
    Ok(())
}

fn family(v: u32) -> Result<Family, Failure> {
    match v {
        0 => Ok(Family::Mlp),
        1 => Ok(Family::Mha),
        2 => Ok(Family::Rnn),
        _ => Err(invalid(format!("unknown family code {v}"))),
    }
}

fn mode(v: u32) -> Result<Mode, Failure> {
    match v {
        0 => Ok(Mode::Classification),
        1 => Ok(Mode::Regression),
        _ => Err(invalid(format!("unknown mode code {v}"))),
    }
}

fn level(v: u32) -> Result<Level, Failure> {
    match v {
        0 => Ok(Level::GtModular),
        1 => Ok(Level::ModularOp),
        2 => Ok(Level::Modular),
        3 => Ok(Level::Monolithic),
        4 => Ok(Level::RandomGate),
        _ => Err(invalid(format!("unknown level code {v}"))),
    }
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Samples a task of `family` (an [`MbFamily`] code) with `rules` rules.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn mb_task_new(family_code: u32, rules: usize, task_seed: u64, out: *mut *mut MbTask) -> MbStatus {
    guard(|| {
        let task = sample_task(family(family_code)?, rules, task_seed, &TaskOptions::default())?;
        write(out, Box::into_raw(Box::new(MbTask(task))), "out")
    })
}

/// Input features per sample (per token for sequence tasks), or 0 for a null task.
///
/// # Safety
/// `task` must be null or a live task handle.
#[no_mangle]
pub unsafe extern "C" fn mb_task_features(task: *const MbTask) -> usize {
    task.as_ref().map_or(0, |t| t.0.features())
}

/// # Safety
/// `task` must be null or a handle from `mb_task_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mb_task_free(task: *mut MbTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// Builds a model of `level` (an [`MbLevel`] code) for `task` within a
/// parameter budget of `capacity`.
///
/// # Safety
/// `task` must be a live task handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mb_model_new(
    task: *const MbTask,
    level_code: u32,
    capacity: usize,
    init_seed: u64,
    out: *mut *mut MbModel,
) -> MbStatus {
    guard(|| {
        let task = borrow(task, "task")?;
        let model = Model::build(&ModelConfig::for_task(level(level_code)?, &task.0, capacity), init_seed)?;
        write(out, Box::into_raw(Box::new(MbModel(model))), "out")
    })
}

/// Number of trainable scalars, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn mb_model_param_count(model: *const MbModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.param_count())
}

/// # Safety
/// `model` must be null or a model handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mb_model_free(model: *mut MbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Default training settings for a family and mode.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_train_options_default(family_code: u32, mode_code: u32, out: *mut MbTrainOptions) -> MbStatus {
    guard(|| {
        let c = TrainConfig::for_family(family(family_code)?, mode(mode_code)?);
        let opts = MbTrainOptions {
            iterations: c.iterations,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            clip_norm: c.clip_norm.unwrap_or(0.0),
            eval_every: c.eval_every,
            eval_samples: c.eval_samples,
        };
        write(out, opts, "out")
    })
}

/// Trains `model` on `task` and writes the mean training loss of the last
/// evaluation window to `final_loss` (if non-null). A diverged run returns
/// `Domain`.
///
/// # Safety
/// Handles must be live; `options` readable; `final_loss` null or writable.
#[no_mangle]
pub unsafe extern "C" fn mb_model_train(
    model: *mut MbModel,
    task: *const MbTask,
    mode_code: u32,
    options: *const MbTrainOptions,
    final_loss: *mut f64,
) -> MbStatus {
    guard(|| {
        let model = borrow_mut(model, "model")?;
        let task = borrow(task, "task")?;
        let o = borrow(options, "options")?;
        let mut cfg = TrainConfig::for_family(task.0.family(), mode(mode_code)?);
        cfg.iterations = o.iterations;
        cfg.batch_size = o.batch_size;
        cfg.learning_rate = o.learning_rate;
        cfg.clip_norm = (o.clip_norm > 0.0).then_some(o.clip_norm);
        cfg.eval_every = o.eval_every;
        cfg.eval_samples = o.eval_samples;
        cfg.shifts = vec![Shift::InDistribution];
        let log = train(&mut model.0, &task.0, &cfg)?;
        if let Some(d) = log.diverged {
            return Err(Failure(MbStatus::Domain, format!("diverged at iteration {}: {}", d.iteration, d.detail)));
        }
        if !final_loss.is_null() {
            *final_loss = log.final_checkpoint().map_or(f64::NAN, |c| c.train_loss);
        }
        Ok(())
    })
}

/// Evaluates `model` on `n_samples` samples of the named shift (`"id"`,
/// `"var2"`, `"len20"`, ...). Writes the error rate or mean absolute error
/// to `performance` and, if `stats` is non-null, a new statistics handle
/// that the caller frees.
///
/// # Safety
/// Handles must be live; `shift` a NUL-terminated string; `performance`
/// writable; `stats` null or writable.
#[no_mangle]
pub unsafe extern "C" fn mb_model_evaluate(
    model: *const MbModel,
    task: *const MbTask,
    mode_code: u32,
    shift: *const c_char,
    n_samples: usize,
    eval_seed: u64,
    performance: *mut f64,
    stats: *mut *mut MbStats,
) -> MbStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        let task = borrow(task, "task")?;
        let shift: Shift = string(shift, "shift")?.parse()?;
        let out = borrow_mut(performance, "performance")?;
        let (perf, acc) = evaluate(&model.0, &task.0, mode(mode_code)?, shift, n_samples, eval_seed)?;
        *out = perf;
        if !stats.is_null() {
            *stats = Box::into_raw(Box::new(MbStats(acc)));
        }
        Ok(())
    })
}

/// Writes a checkpoint manifest to `path` and its weights next to it.
///
/// # Safety
/// `model` must be live and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mb_model_save(model: *const MbModel, path: *const c_char) -> MbStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        save_checkpoint(&model.0, Path::new(string(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mb_model_load(path: *const c_char, out: *mut *mut MbModel) -> MbStatus {
    guard(|| {
        let model = load_checkpoint(Path::new(string(path, "path")?))?;
        write(out, Box::into_raw(Box::new(MbModel(model))), "out")
    })
}

/// Empty statistics over `rules` rules and modules.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_stats_new(rules: usize, out: *mut *mut MbStats) -> MbStatus {
    guard(|| {
        if rules == 0 {
            return Err(invalid("rules must be at least 1"));
        }
        write(out, Box::into_raw(Box::new(MbStats(ActivationStats::new(rules)))), "out")
    })
}

/// Adds `n_points` decision points: `rule_ids[n_points]` and row-major
/// `activations[n_points * rules]`.
///
/// # Safety
/// `stats` must be live and the arrays readable for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mb_stats_accumulate(
    stats: *mut MbStats,
    rule_ids: *const usize,
    activations: *const f64,
    n_points: usize,
) -> MbStatus {
    guard(|| {
        let stats = borrow_mut(stats, "stats")?;
        let ids = slice(rule_ids, n_points, "rule_ids")?;
        let acts = slice(activations, n_points * stats.0.rules, "activations")?;
        stats.0.accumulate(ids, acts)?;
        Ok(())
    })
}

/// Decision points accumulated so far, or 0 for a null handle.
///
/// # Safety
/// `stats` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn mb_stats_total(stats: *const MbStats) -> u64 {
    stats.as_ref().map_or(0, |s| s.0.total())
}

/// # Safety
/// `stats` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mb_stats_report(stats: *const MbStats, out: *mut MbMetricReport) -> MbStatus {
    guard(|| {
        let r = MetricReport::from_stats(&borrow(stats, "stats")?.0)?;
        let report = MbMetricReport {
            collapse_avg: r.collapse_avg,
            collapse_worst: r.collapse_worst,
            alignment: r.alignment,
            inverse_mutual_information: r.inverse_mutual_information,
        };
        write(out, report, "out")
    })
}

/// # Safety
/// `stats` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mb_stats_free(stats: *mut MbStats) {
    if !stats.is_null() {
        drop(Box::from_raw(stats));
    }
}

/// Average collapse of a module marginal `p[r]`.
///
/// # Safety
/// `p` must be readable for `r` values and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mb_collapse_avg(p: *const f64, r: usize, out: *mut f64) -> MbStatus {
    guard(|| write(out, metrics::collapse_avg(slice(p, r, "p")?)?, "out"))
}

/// Worst-case collapse of a module marginal `p[r]`.
///
/// # Safety
/// `p` must be readable for `r` values and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mb_collapse_worst(p: *const f64, r: usize, out: *mut f64) -> MbStatus {
    guard(|| write(out, metrics::collapse_worst(slice(p, r, "p")?)?, "out"))
}

/// Alignment of a row-major `r x r` row-stochastic activation matrix.
///
/// # Safety
/// `a` must be readable for `r * r` values and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mb_alignment(a: *const f64, r: usize, out: *mut f64) -> MbStatus {
    guard(|| write(out, metrics::alignment(slice(a, r * r, "a")?, r)?, "out"))
}

/// Inverse mutual information of a row-major `r x r` joint distribution.
///
/// # Safety
/// `joint` must be readable for `r * r` values and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mb_inverse_mutual_information(joint: *const f64, r: usize, out: *mut f64) -> MbStatus {
    guard(|| write(out, metrics::inverse_mutual_information(slice(joint, r * r, "joint")?, r)?, "out"))
}

/// Minimum-cost assignment of a row-major `n x n` cost matrix: row `i` is
/// assigned column `assignment[i]`.
///
/// # Safety
/// `cost` must be readable for `n * n` values and `assignment` writable for `n`.
#[no_mangle]
pub unsafe extern "C" fn mb_hungarian(cost: *const f64, n: usize, assignment: *mut usize) -> MbStatus {
    guard(|| {
        let perm = metrics::hungarian(slice(cost, n * n, "cost")?, n)?;
        slice_mut(assignment, n, "assignment")?.copy_from_slice(&perm);
        Ok(())
    })
}
