//! C ABI over the `ibmd` library.
//!
//! Conventions:
//! - every fallible call returns an [`IbmdStatus`]; `IBMD_STATUS_OK` is zero;
//! - on failure, [`ibmd_last_error`] returns a message owned by the calling
//!   thread, valid until that thread's next failing call;
//! - objects are opaque handles created by `*_new`/`*_load` and released by
//!   the matching `*_free` (null is accepted and ignored);
//! - matrices are dense row-major `double` buffers of `rows * dim` entries.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::{ArrayView2, ArrayViewMut2};

use ibmd::bridges::sample_bridge_batch;
use ibmd::cli::report::{load_generator, load_net};
use ibmd::cli::{self, Command};
use ibmd::eval::energy_distance;
use ibmd::ibmd::Generator;
use ibmd::netcore::BridgeNet;
use ibmd::rng::seeded;
use ibmd::{Error, Schedule, X0Predictor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IbmdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Domain = 4,
    DimensionMismatch = 5,
    NonFinite = 6,
    Divergence = 7,
    Singular = 8,
    Schedule = 9,
    Coupling = 10,
    Config = 11,
    Checkpoint = 12,
    Io = 13,
    CheckFailed = 14,
    Panic = 15,
}

impl From<&Error> for IbmdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Domain { .. } | Error::ExcludedTime { .. } => IbmdStatus::Domain,
            Error::DimensionMismatch { .. } => IbmdStatus::DimensionMismatch,
            Error::NonFinite { .. } => IbmdStatus::NonFinite,
            Error::Divergence { .. } => IbmdStatus::Divergence,
            Error::Singular { .. } => IbmdStatus::Singular,
            Error::Schedule(_) => IbmdStatus::Schedule,
            Error::Coupling(_) => IbmdStatus::Coupling,
            Error::InvalidArgument(_) => IbmdStatus::InvalidArgument,
            Error::Checkpoint(_) | Error::Json(_) => IbmdStatus::Checkpoint,
            Error::Config(_) => IbmdStatus::Config,
            Error::Io(_) => IbmdStatus::Io,
        }
    }
}

/// Bridge interpolation `x_t = a x_T + b x0 + c z` with `c2 = c^2`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbmdBridgeCoeffs {
    pub a: f64,
    pub b: f64,
    pub c2: f64,
}

/// Opaque noise schedule.
pub struct IbmdSchedule(Schedule);

/// Opaque data predictor loaded from a checkpoint (teacher or fake bridge).
pub struct IbmdNet(BridgeNet);

/// Opaque distilled generator together with the schedule it was trained on.
pub struct IbmdGenerator {
    gen: Generator,
    schedule: Schedule,
}

struct Failure(IbmdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(IbmdStatus::from(&e), e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let text = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> IbmdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IbmdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            IbmdStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(IbmdStatus::NullPointer, format!("{name} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(IbmdStatus::InvalidArgument, msg.into())
}

unsafe fn obj<'a, T>(ptr: *const T, name: &str) -> FfiResult<&'a T> {
    ptr.as_ref().ok_or_else(|| null(name))
}

unsafe fn obj_mut<'a, T>(ptr: *mut T, name: &str) -> FfiResult<&'a mut T> {
    ptr.as_mut().ok_or_else(|| null(name))
}

unsafe fn text<'a>(ptr: *const c_char, name: &str) -> FfiResult<&'a str> {
    if ptr.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(IbmdStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn matrix<'a>(ptr: *const f64, rows: usize, cols: usize, name: &str) -> FfiResult<ArrayView2<'a, f64>> {
    if ptr.is_null() {
        return Err(null(name));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| invalid(format!("{name} size overflows")))?;
    let data = std::slice::from_raw_parts(ptr, len);
    ArrayView2::from_shape((rows, cols), data).map_err(|e| invalid(format!("{name}: {e}")))
}

unsafe fn matrix_mut<'a>(ptr: *mut f64, rows: usize, cols: usize, name: &str) -> FfiResult<ArrayViewMut2<'a, f64>> {
    if ptr.is_null() {
        return Err(null(name));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| invalid(format!("{name} size overflows")))?;
    let data = std::slice::from_raw_parts_mut(ptr, len);
    ArrayViewMut2::from_shape((rows, cols), data).map_err(|e| invalid(format!("{name}: {e}")))
}

unsafe fn put<T>(out: *mut T, value: T, name: &str) -> FfiResult<()> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

unsafe fn release<T>(ptr: *mut T) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ibmd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failing call on this thread, or null if none.
#[no_mangle]
pub extern "C" fn ibmd_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Static name of a status code, e.g. `"dimension_mismatch"`.
#[no_mangle]
pub extern "C" fn ibmd_status_name(status: IbmdStatus) -> *const c_char {
    let name: &'static str = match status {
        IbmdStatus::Ok => "ok\0",
        IbmdStatus::NullPointer => "null_pointer\0",
        IbmdStatus::InvalidUtf8 => "invalid_utf8\0",
        IbmdStatus::InvalidArgument => "invalid_argument\0",
        IbmdStatus::Domain => "domain\0",
        IbmdStatus::DimensionMismatch => "dimension_mismatch\0",
        IbmdStatus::NonFinite => "non_finite\0",
        IbmdStatus::Divergence => "divergence\0",
        IbmdStatus::Singular => "singular\0",
        IbmdStatus::Schedule => "schedule\0",
        IbmdStatus::Coupling => "coupling\0",
        IbmdStatus::Config => "config\0",
        IbmdStatus::Checkpoint => "checkpoint\0",
        IbmdStatus::Io => "io\0",
        IbmdStatus::CheckFailed => "check_failed\0",
        IbmdStatus::Panic => "panic\0",
    };
    name.as_ptr().cast()
}

/// Brownian prior `dx = sqrt(eps) dW` on `[0, horizon]`.
///
/// # Safety
/// `out` must be null or valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn ibmd_schedule_brownian(eps: f64, horizon: f64, out: *mut *mut IbmdSchedule) -> IbmdStatus {
    guard(|| {
        let s = Schedule::brownian(eps, horizon)?;
        put(out, boxed(IbmdSchedule(s)), "out")
    })
}

/// Variance-preserving prior with linear `beta` on `[0, horizon]`.
///
/// # Safety
/// `out` must be null or valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn ibmd_schedule_vp(
    beta_min: f64,
    beta_max: f64,
    horizon: f64,
    out: *mut *mut IbmdSchedule,
) -> IbmdStatus {
    guard(|| {
        let s = Schedule::variance_preserving(beta_min, beta_max, horizon)?;
        put(out, boxed(IbmdSchedule(s)), "out")
    })
}

/// # Safety
/// `schedule` must be null or a handle from `ibmd_schedule_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ibmd_schedule_free(schedule: *mut IbmdSchedule) {
    release(schedule);
}

/// # Safety
/// `schedule` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ibmd_schedule_horizon(schedule: *const IbmdSchedule, out: *mut f64) -> IbmdStatus {
    guard(|| put(out, obj(schedule, "schedule")?.0.horizon(), "out"))
}

/// Coefficients of the bridge marginal at time `t`.
///
/// # Safety
/// `schedule` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ibmd_schedule_bridge_coeffs(
    schedule: *const IbmdSchedule,
    t: f64,
    out: *mut IbmdBridgeCoeffs,
) -> IbmdStatus {
    guard(|| {
        let c = obj(schedule, "schedule")?.0.bridge_coeffs(t)?;
        put(
            out,
            IbmdBridgeCoeffs {
                a: c.a,
                b: c.b,
                c2: c.c2,
            },
            "out",
        )
    })
}

/// Draws `x_t` for each row pair `(x0, x_end)` at the per-row times `t`.
///
/// # Safety
/// `x0`, `x_end` and `out` must hold `rows * dim` doubles, `t` must hold
/// `rows` doubles, and `out` must not alias the inputs.
#[no_mangle]
pub unsafe extern "C" fn ibmd_bridge_sample(
    schedule: *const IbmdSchedule,
    x0: *const f64,
    x_end: *const f64,
    t: *const f64,
    rows: usize,
    dim: usize,
    seed: u64,
    out: *mut f64,
) -> IbmdStatus {
    guard(|| {
        let s = &obj(schedule, "schedule")?.0;
        let x0 = matrix(x0, rows, dim, "x0")?;
        let x_end = matrix(x_end, rows, dim, "x_end")?;
        let t = matrix(t, rows, 1, "t")?;
        let times: Vec<f64> = t.column(0).to_vec();
        let sample = sample_bridge_batch(s, x0, x_end, &times, &mut seeded(seed))?;
        matrix_mut(out, rows, dim, "out")?.assign(&sample.xt);
        Ok(())
    })
}

/// Loads a predictor checkpoint; `path` may name the stem, `.bin` or `.json`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ibmd_net_load(path: *const c_char, out: *mut *mut IbmdNet) -> IbmdStatus {
    guard(|| {
        let (net, _) = load_net(Path::new(text(path, "path")?))?;
        put(out, boxed(IbmdNet(net)), "out")
    })
}

/// # Safety
/// `net` must be null or a handle from `ibmd_net_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ibmd_net_free(net: *mut IbmdNet) {
    release(net);
}

/// # Safety
/// `net` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ibmd_net_dim(net: *const IbmdNet, out: *mut usize) -> IbmdStatus {
    guard(|| put(out, obj(net, "net")?.0.dim(), "out"))
}

/// Whether the predictor consumes the `x_end` endpoint.
///
/// # Safety
/// `net` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ibmd_net_is_conditional(net: *const IbmdNet, out: *mut bool) -> IbmdStatus {
    guard(|| put(out, obj(net, "net")?.0.conditional(), "out"))
}

/// Predicts `x0` from `x_t` at per-row times `t`. `cond` may be null for
/// unconditional predictors.
///
/// # Safety
/// `xt`, `out` and a non-null `cond` must hold `rows * dim` doubles; `t`
/// must hold `rows` doubles.
#[no_mangle]
pub unsafe extern "C" fn ibmd_net_predict(
    net: *const IbmdNet,
    xt: *const f64,
    t: *const f64,
    cond: *const f64,
    rows: usize,
    out: *mut f64,
) -> IbmdStatus {
    guard(|| {
        let net = &obj(net, "net")?.0;
        let dim = net.dim();
        let xt = matrix(xt, rows, dim, "xt")?;
        let times = matrix(t, rows, 1, "t")?.column(0).to_vec();
        let cond = if cond.is_null() {
            if net.conditional() {
                return Err(null("cond"));
            }
            None
        } else {
            Some(matrix(cond, rows, dim, "cond")?)
        };
        let pred = net.predict(xt, &times, cond, &mut seeded(0))?;
        matrix_mut(out, rows, dim, "out")?.assign(&pred);
        Ok(())
    })
}

/// Loads a generator checkpoint and the schedule recorded beside it.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ibmd_generator_load(path: *const c_char, out: *mut *mut IbmdGenerator) -> IbmdStatus {
    guard(|| {
        let (gen, sidecar) = load_generator(Path::new(text(path, "path")?))?;
        let schedule = sidecar.schedule.build()?;
        put(out, boxed(IbmdGenerator { gen, schedule }), "out")
    })
}

/// # Safety
/// `gen` must be null or a handle from `ibmd_generator_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ibmd_generator_free(gen: *mut IbmdGenerator) {
    release(gen);
}

/// # Safety
/// `gen` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ibmd_generator_dim(gen: *const IbmdGenerator, out: *mut usize) -> IbmdStatus {
    guard(|| put(out, obj(gen, "gen")?.gen.dim(), "out"))
}

/// Number of generator evaluations per sample.
///
/// # Safety
/// `gen` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn ibmd_generator_steps(gen: *const IbmdGenerator, out: *mut usize) -> IbmdStatus {
    guard(|| put(out, obj(gen, "gen")?.gen.steps(), "out"))
}

/// Re-grids the same network onto `steps` uniform inference times.
///
/// # Safety
/// `gen` must be a live handle not shared with another thread.
#[no_mangle]
pub unsafe extern "C" fn ibmd_generator_set_steps(gen: *mut IbmdGenerator, steps: usize) -> IbmdStatus {
    guard(|| {
        let g = obj_mut(gen, "gen")?;
        g.gen = g.gen.with_steps(steps)?;
        Ok(())
    })
}

/// Draws one `x0` per row of `x_end`.
///
/// # Safety
/// `x_end` and `out` must hold `rows * dim` doubles and must not alias.
#[no_mangle]
pub unsafe extern "C" fn ibmd_generator_sample(
    gen: *const IbmdGenerator,
    x_end: *const f64,
    rows: usize,
    seed: u64,
    out: *mut f64,
) -> IbmdStatus {
    guard(|| {
        let g = obj(gen, "gen")?;
        let dim = g.gen.dim();
        let x_end = matrix(x_end, rows, dim, "x_end")?;
        let x0 = g.gen.sample(&g.schedule, x_end, &mut seeded(seed))?;
        matrix_mut(out, rows, dim, "out")?.assign(&x0);
        Ok(())
    })
}

/// Energy distance between two sample sets of the same dimension.
///
/// # Safety
/// `a` must hold `rows_a * dim` doubles, `b` must hold `rows_b * dim`.
#[no_mangle]
pub unsafe extern "C" fn ibmd_energy_distance(
    a: *const f64,
    rows_a: usize,
    b: *const f64,
    rows_b: usize,
    dim: usize,
    out: *mut f64,
) -> IbmdStatus {
    guard(|| {
        let a = matrix(a, rows_a, dim, "a")?;
        let b = matrix(b, rows_b, dim, "b")?;
        put(out, energy_distance(a, b)?, "out")
    })
}

/// Runs a pipeline command (`train-teacher`, `distill`, `eval`,
/// `verify-identity`) from a TOML config, writing artifacts to `out_dir`.
/// `seed` may be null to keep the configured seed. Returns
/// `IBMD_STATUS_CHECK_FAILED` when the run completes but its check fails.
///
/// # Safety
/// `command`, `config_path` and `out_dir` must be NUL-terminated strings;
/// a non-null `seed` must point to a readable `uint64_t`.
#[no_mangle]
pub unsafe extern "C" fn ibmd_run(
    command: *const c_char,
    config_path: *const c_char,
    out_dir: *const c_char,
    seed: *const u64,
) -> IbmdStatus {
    guard(|| {
        let command = match text(command, "command")? {
            "train-teacher" => Command::TrainTeacher,
            "distill" => Command::Distill,
            "eval" => Command::Eval,
            "verify-identity" => Command::VerifyIdentity,
            other => return Err(invalid(format!("unknown command {other:?}"))),
        };
        let mut cfg = cli::load_config(Path::new(text(config_path, "config_path")?))?;
        if let Some(seed) = seed.as_ref() {
            cfg.seed = *seed;
        }
        let summary = cli::run(command, cfg, Path::new(text(out_dir, "out_dir")?))?;
        if summary.passed {
            Ok(())
        } else {
            Err(Failure(IbmdStatus::CheckFailed, summary.lines.join("\n")))
        }
    })
}
