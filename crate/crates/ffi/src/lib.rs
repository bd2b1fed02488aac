//! C ABI over the `diffmia` library.
//!
//! Every fallible function returns a [`DmiaStatus`]. On failure the message is
//! kept per thread and can be read with [`dmia_last_error_message`] until the
//! next failing call on that thread. Output buffers are caller-owned.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use diffmia::attacks::{graybox_scores, whitebox_scores, AttackConfig, Scenario, Statistic};
use diffmia::checkpoint::load_checkpoint;
use diffmia::data::{QuerySample, QuerySet};
use diffmia::diffusion::{estimated_trajectory, exact_trajectory, Denoiser, DiffusionModel, GrayBoxView};
use diffmia::metrics::{roc_curve, tpr_at_fpr};
use diffmia::schedule::{NoiseSchedule, ScheduleKind};
use diffmia::Error;

/// Opaque handle to a trained model.
pub struct DmiaModel {
    inner: DiffusionModel,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmiaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferSize = 3,
    Io = 4,
    Checkpoint = 5,
    Numeric = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmiaStatistic {
    Sum = 0,
    Median = 1,
    Min = 2,
    Max = 3,
}

/// Schedule an attacker assumes when noising queries.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmiaSchedule {
    Advertised = 0,
    Linear = 1,
    Cosine = 2,
}

impl From<DmiaStatistic> for Statistic {
    fn from(s: DmiaStatistic) -> Self {
        match s {
            DmiaStatistic::Sum => Statistic::Sum,
            DmiaStatistic::Median => Statistic::Median,
            DmiaStatistic::Min => Statistic::Min,
            DmiaStatistic::Max => Statistic::Max,
        }
    }
}

impl DmiaSchedule {
    fn kind(self) -> Option<ScheduleKind> {
        match self {
            DmiaSchedule::Advertised => None,
            DmiaSchedule::Linear => Some(ScheduleKind::Linear),
            DmiaSchedule::Cosine => Some(ScheduleKind::Cosine),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(DmiaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) | Error::EmptyTrajectory(_) | Error::Config(_) => {
                DmiaStatus::InvalidArgument
            }
            Error::Io { .. } => DmiaStatus::Io,
            Error::Checkpoint(_) => DmiaStatus::Checkpoint,
            Error::NonFinite(_) | Error::NumericallyDegenerate(_) | Error::ScheduleConstruction(_) => {
                DmiaStatus::Numeric
            }
            _ => DmiaStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: DmiaStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DmiaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DmiaStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DmiaStatus::Internal
        }
    }
}

unsafe fn model_ref<'a>(model: *const DmiaModel) -> Result<&'a DiffusionModel, Failure> {
    model.as_ref().map(|m| &m.inner).ok_or_else(|| fail(DmiaStatus::NullPointer, "model handle is null"))
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(DmiaStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a>(ptr: *mut f64, len: usize, needed: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len != needed {
        return Err(fail(
            DmiaStatus::BufferSize,
            format!("{what} holds {len} values but {needed} are required"),
        ));
    }
    if ptr.is_null() {
        return Err(fail(DmiaStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn guessed(model: &DiffusionModel, schedule: DmiaSchedule) -> Result<NoiseSchedule, Failure> {
    match schedule.kind() {
        None => Ok(model.schedule().clone()),
        Some(kind) => Ok(NoiseSchedule::build(kind, model.schedule().steps())?),
    }
}

unsafe fn query_rows(xs: *const f64, n: usize, dim: usize) -> Result<QuerySet, Failure> {
    let flat = input(xs, n * dim, "query points")?;
    let samples = flat
        .chunks_exact(dim.max(1))
        .enumerate()
        .map(|(i, x)| QuerySample { id: i as u64, x: x.to_vec(), is_member: false })
        .collect();
    Ok(QuerySet { samples })
}

/// Message of the last failure on this thread, or null if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dmia_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file. On success `*out` receives a handle that must be
/// released with [`dmia_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dmia_model_load(path: *const c_char, out: *mut *mut DmiaModel) -> DmiaStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(DmiaStatus::NullPointer, "path or output pointer is null"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(DmiaStatus::InvalidArgument, "path is not UTF-8"))?;
        let inner = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(DmiaModel { inner }));
        Ok(())
    })
}

/// Releases a handle from [`dmia_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dmia_model_free(model: *mut DmiaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Data dimension of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dmia_model_data_dim(model: *const DmiaModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.data_dim())
}

/// Number of diffusion steps T, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dmia_model_steps(model: *const DmiaModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.schedule().steps())
}

/// Exact loss terms of one point. `out` must hold T + 1 values: index 0 is the
/// reconstruction term, index T the prior term.
///
/// # Safety
/// `x0` must point to `dim` values and `out` to `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn dmia_exact_trajectory(
    model: *const DmiaModel,
    sample_id: u64,
    x0: *const f64,
    dim: usize,
    noise_seed: u64,
    noise_draws: usize,
    out: *mut f64,
    out_len: usize,
) -> DmiaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x0 = input(x0, dim, "x0")?;
        let steps = m.schedule().steps();
        let out = output(out, out_len, steps + 1, "out")?;
        let traj = exact_trajectory(m, sample_id, x0, noise_seed, noise_draws)?;
        out.copy_from_slice(&traj.value_list());
        Ok(())
    })
}

/// Reconstruction errors of one point at steps 1..=T, using only the model's
/// reconstruction interface. `out` must hold T values.
///
/// # Safety
/// `x0` must point to `dim` values and `out` to `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn dmia_estimated_trajectory(
    model: *const DmiaModel,
    sample_id: u64,
    x0: *const f64,
    dim: usize,
    schedule: DmiaSchedule,
    noise_seed: u64,
    out: *mut f64,
    out_len: usize,
) -> DmiaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x0 = input(x0, dim, "x0")?;
        let out = output(out, out_len, m.schedule().steps(), "out")?;
        let guess = guessed(m, schedule)?;
        let traj = estimated_trajectory(&GrayBoxView(m), sample_id, x0, &guess, None, noise_seed)?;
        out.copy_from_slice(&traj.value_list());
        Ok(())
    })
}

#[allow(clippy::too_many_arguments)]
unsafe fn scores(
    scenario: Scenario,
    model: *const DmiaModel,
    xs: *const f64,
    n: usize,
    dim: usize,
    statistic: DmiaStatistic,
    truncation_fraction: f64,
    schedule: DmiaSchedule,
    noise_seed: u64,
    out: *mut f64,
    out_len: usize,
) -> Result<(), Failure> {
    let m = model_ref(model)?;
    if dim != m.data_dim() {
        return Err(fail(
            DmiaStatus::InvalidArgument,
            format!("dim {dim} does not match the model's {}", m.data_dim()),
        ));
    }
    let out = output(out, out_len, n, "out")?;
    let query = query_rows(xs, n, dim)?;
    let mut config = AttackConfig::new(scenario);
    config.statistic = Some(statistic.into());
    config.truncation_fraction = truncation_fraction;
    config.scheduler_guess = schedule.kind();
    config.noise_seed = noise_seed;
    let result = match scenario {
        Scenario::WhiteBox => whitebox_scores(m, &query, &config)?,
        _ => graybox_scores(&GrayBoxView(m), &query, &config)?,
    };
    out.copy_from_slice(&result.scores());
    Ok(())
}

/// White-box membership scores for `n` points stored row-major in `xs`.
/// Lower scores indicate membership. `schedule` is ignored.
///
/// # Safety
/// `xs` must point to `n * dim` values and `out` to `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn dmia_whitebox_scores(
    model: *const DmiaModel,
    xs: *const f64,
    n: usize,
    dim: usize,
    statistic: DmiaStatistic,
    truncation_fraction: f64,
    noise_seed: u64,
    out: *mut f64,
    out_len: usize,
) -> DmiaStatus {
    guard(|| {
        scores(
            Scenario::WhiteBox,
            model,
            xs,
            n,
            dim,
            statistic,
            truncation_fraction,
            DmiaSchedule::Advertised,
            noise_seed,
            out,
            out_len,
        )
    })
}

/// Gray-box membership scores, computed from reconstructions only.
///
/// # Safety
/// `xs` must point to `n * dim` values and `out` to `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn dmia_graybox_scores(
    model: *const DmiaModel,
    xs: *const f64,
    n: usize,
    dim: usize,
    statistic: DmiaStatistic,
    truncation_fraction: f64,
    schedule: DmiaSchedule,
    noise_seed: u64,
    out: *mut f64,
    out_len: usize,
) -> DmiaStatus {
    guard(|| {
        scores(
            Scenario::GrayBox,
            model,
            xs,
            n,
            dim,
            statistic,
            truncation_fraction,
            schedule,
            noise_seed,
            out,
            out_len,
        )
    })
}

unsafe fn curve_inputs(
    scores: *const f64,
    labels: *const u8,
    n: usize,
) -> Result<(Vec<f64>, Vec<bool>), Failure> {
    let s = input(scores, n, "scores")?;
    let l = input(labels, n, "labels")?;
    Ok((s.to_vec(), l.iter().map(|&b| b != 0).collect()))
}

/// ROC AUC of lower-is-member scores. Nonzero labels mark members.
///
/// # Safety
/// `scores` and `labels` must point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dmia_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> DmiaStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(DmiaStatus::NullPointer, "out is null"));
        }
        let (s, l) = curve_inputs(scores, labels, n)?;
        *out = roc_curve(&s, &l)?.auc;
        Ok(())
    })
}

/// Highest true-positive rate whose false-positive rate does not exceed `fpr`.
///
/// # Safety
/// `scores` and `labels` must point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dmia_tpr_at_fpr(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    fpr: f64,
    out: *mut f64,
) -> DmiaStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(DmiaStatus::NullPointer, "out is null"));
        }
        if !(0.0..=1.0).contains(&fpr) {
            return Err(fail(DmiaStatus::InvalidArgument, format!("fpr {fpr} outside [0, 1]")));
        }
        let (s, l) = curve_inputs(scores, labels, n)?;
        *out = tpr_at_fpr(&roc_curve(&s, &l)?, fpr);
        Ok(())
    })
}
