//! C interface to the planner.
//!
//! Every fallible function returns a [`PhaseplanError`] code; on failure the
//! message is available from [`phaseplan_last_error`] on the same thread until
//! the next failing call. Plans are opaque handles released with
//! [`phaseplan_plan_free`]. Strings returned by the library are released with
//! [`phaseplan_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use phaseplan::report::{run_plan, Mode, PlanOutcome};
use phaseplan::{parse_chain, parse_task, SolveStatus, SolverOptions, TranscribeParams};

/// Result code of a fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseplanError {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Chain or task text could not be parsed.
    Parse = 3,
    /// Option values out of range.
    InvalidOption = 4,
    /// Transcription or a baseline phase failed; no plan was produced.
    Plan = 5,
    IndexOutOfRange = 6,
    /// A bug inside the library; the call had no effect.
    Internal = 7,
}

/// Solver outcome of a plan.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseplanStatus {
    Optimal = 0,
    MaxIterations = 1,
    Infeasible = 2,
    NumericalFailure = 3,
}

impl From<SolveStatus> for PhaseplanStatus {
    fn from(s: SolveStatus) -> Self {
        match s {
            SolveStatus::Optimal => Self::Optimal,
            SolveStatus::MaxIterations => Self::MaxIterations,
            SolveStatus::Infeasible => Self::Infeasible,
            SolveStatus::NumericalFailure => Self::NumericalFailure,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseplanMode {
    /// All phases in one problem.
    Joint = 0,
    /// Phase by phase, stopping at every boundary.
    Baseline = 1,
}

/// Planning options. Start from [`phaseplan_options_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct PhaseplanOptions {
    pub mode: PhaseplanMode,
    /// Steps per phase, at least 2.
    pub steps: u32,
    pub w_vel: f64,
    pub w_acc: f64,
    /// Minimum phase duration in seconds.
    pub min_phase_duration: f64,
    pub constraint_tol: f64,
    pub max_iterations: u32,
    /// Wall-clock budget in seconds; zero or negative for none.
    pub time_limit: f64,
}

/// Opaque plan handle.
pub struct PhaseplanPlan {
    outcome: PlanOutcome,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(code: PhaseplanError, message: impl Into<String>) -> PhaseplanError {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
    code
}

/// Runs `f`, turning a panic into [`PhaseplanError::Internal`].
fn guard(f: impl FnOnce() -> PhaseplanError) -> PhaseplanError {
    catch_unwind(AssertUnwindSafe(f))
        .unwrap_or_else(|_| fail(PhaseplanError::Internal, "internal error"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, PhaseplanError> {
    if p.is_null() {
        return Err(fail(PhaseplanError::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| fail(PhaseplanError::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn plan_ref<'a>(plan: *const PhaseplanPlan) -> Result<&'a PlanOutcome, PhaseplanError> {
    plan.as_ref()
        .map(|p| &p.outcome)
        .ok_or_else(|| fail(PhaseplanError::NullArgument, "plan is null"))
}

fn code(r: Result<(), PhaseplanError>) -> PhaseplanError {
    r.err().unwrap_or(PhaseplanError::Ok)
}

/// Message of the last failing call on this thread, or an empty string. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn phaseplan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn phaseplan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn phaseplan_options_default() -> PhaseplanOptions {
    let p = TranscribeParams::default();
    let s = SolverOptions::default();
    PhaseplanOptions {
        mode: PhaseplanMode::Joint,
        steps: p.steps as u32,
        w_vel: p.w_vel,
        w_acc: p.w_acc,
        min_phase_duration: p.min_phase_duration,
        constraint_tol: s.constraint_tol,
        max_iterations: s.max_iterations as u32,
        time_limit: 0.0,
    }
}

/// Plans the task in `task_text` for the chain in `chain_text`. `options`
/// may be null for defaults. On success `*out` owns a new plan, which is
/// produced even when the solver stops short; check its status.
///
/// # Safety
/// Text arguments must be null or NUL-terminated strings, `options` null or
/// valid, and `out` a valid pointer to write to.
#[no_mangle]
pub unsafe extern "C" fn phaseplan_plan(
    chain_text: *const c_char,
    task_text: *const c_char,
    options: *const PhaseplanOptions,
    out: *mut *mut PhaseplanPlan,
) -> PhaseplanError {
    guard(|| {
        code((|| {
            if out.is_null() {
                return Err(fail(PhaseplanError::NullArgument, "out is null"));
            }
            *out = ptr::null_mut();
            let chain = text(chain_text, "chain")?;
            let task = text(task_text, "task")?;
            let o = options.as_ref().copied().unwrap_or_else(|| phaseplan_options_default());

            let chain = parse_chain(chain)
                .map_err(|e| fail(PhaseplanError::Parse, format!("chain: {e}")))?;
            let task = parse_task(task, &chain)
                .map_err(|e| fail(PhaseplanError::Parse, format!("task: {e}")))?;
            let params = TranscribeParams {
                steps: o.steps as usize,
                w_vel: o.w_vel,
                w_acc: o.w_acc,
                min_phase_duration: o.min_phase_duration,
                ..TranscribeParams::default()
            };
            params
                .validate()
                .map_err(|e| fail(PhaseplanError::InvalidOption, e.to_string()))?;
            let solver = SolverOptions {
                constraint_tol: o.constraint_tol,
                max_iterations: o.max_iterations as usize,
                time_limit: (o.time_limit > 0.0).then_some(o.time_limit),
                ..SolverOptions::default()
            };
            solver
                .validate()
                .map_err(|e| fail(PhaseplanError::InvalidOption, e))?;
            let mode = match o.mode {
                PhaseplanMode::Joint => Mode::Joint,
                PhaseplanMode::Baseline => Mode::Baseline,
            };
            let outcome = run_plan(&task, &params, &solver, mode)
                .map_err(|e| fail(PhaseplanError::Plan, e.to_string()))?;
            *out = Box::into_raw(Box::new(PhaseplanPlan { outcome }));
            Ok(())
        })())
    })
}

/// Releases a plan. Null is ignored.
///
/// # Safety
/// `plan` must be null or come from [`phaseplan_plan`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn phaseplan_plan_free(plan: *mut PhaseplanPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// # Safety
/// `plan` must be null or a live plan; `status` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn phaseplan_plan_status(
    plan: *const PhaseplanPlan,
    status: *mut PhaseplanStatus,
) -> PhaseplanError {
    guard(|| {
        code((|| {
            let p = plan_ref(plan)?;
            let s = status
                .as_mut()
                .ok_or_else(|| fail(PhaseplanError::NullArgument, "status is null"))?;
            *s = p.status.into();
            Ok(())
        })())
    })
}

/// Total duration in seconds, or NaN for a null plan.
///
/// # Safety
/// `plan` must be null or a live plan.
#[no_mangle]
pub unsafe extern "C" fn phaseplan_plan_duration(plan: *const PhaseplanPlan) -> f64 {
    plan.as_ref().map_or(f64::NAN, |p| p.outcome.trajectory.duration())
}

/// Worst constraint violation of the plan, or NaN for a null plan.
///
/// # Safety
/// `plan` must be null or a live plan.
#[no_mangle]
pub unsafe extern "C" fn phaseplan_plan_max_violation(plan: *const PhaseplanPlan) -> f64 {
    plan.as_ref().map_or(f64::NAN, |p| p.outcome.max_violation)
}

/// Degrees of freedom, or 0 for a null plan.
///
/// # Safety
/// `plan` must be null or a live plan.
#[no_mangle]
pub unsafe extern "C" fn phaseplan_plan_dof(plan: *const PhaseplanPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.outcome.trajectory.n)
}

/// Solver iterations, summed over phases for the baseline; 0 for a null
/// plan.
///
/// # Safety
/// `plan` must be null or a live plan.
#[no_mangle]
pub unsafe extern "C" fn phaseplan_plan_iterations(plan: *const PhaseplanPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.outcome.iterations)
}

/// Number of trajectory nodes, or 0 for a null plan.
///
/// # Safety
/// `plan` must be null or a live plan.
#[no_mangle]
pub unsafe extern "C" fn phaseplan_plan_node_count(plan: *const PhaseplanPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.outcome.trajectory.states.len())
}

/// Number of phases, or 0 for a null plan.
///
/// # Safety
/// `plan` must be null or a live plan.
#[no_mangle]
pub unsafe extern "C" fn phaseplan_plan_phase_count(plan: *const PhaseplanPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.outcome.trajectory.phase_count())
}

/// Copies the end time of every phase into `out`, which holds `len` values.
///
/// # Safety
/// `plan` must be null or a live plan; `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn phaseplan_plan_phase_end_times(
    plan: *const PhaseplanPlan,
    out: *mut f64,
    len: usize,
) -> PhaseplanError {
    guard(|| {
        code((|| {
            let ends = &plan_ref(plan)?.trajectory.phase_end_times;
            if out.is_null() {
                return Err(fail(PhaseplanError::NullArgument, "out is null"));
            }
            if len < ends.len() {
                return Err(fail(
                    PhaseplanError::IndexOutOfRange,
                    format!("buffer holds {len} values, {} phases", ends.len()),
                ));
            }
            ptr::copy_nonoverlapping(ends.as_ptr(), out, ends.len());
            Ok(())
        })())
    })
}

/// Time, positions and velocities of node `k`. `q` and `dq` must each hold
/// [`phaseplan_plan_dof`] values; either may be null to skip it.
///
/// # Safety
/// `plan` must be null or a live plan; non-null buffers must be valid for
/// the writes described above.
#[no_mangle]
pub unsafe extern "C" fn phaseplan_plan_node(
    plan: *const PhaseplanPlan,
    k: usize,
    t: *mut f64,
    q: *mut f64,
    dq: *mut f64,
) -> PhaseplanError {
    guard(|| {
        code((|| {
            let traj = &plan_ref(plan)?.trajectory;
            if k >= traj.states.len() {
                return Err(fail(
                    PhaseplanError::IndexOutOfRange,
                    format!("node {k} of {}", traj.states.len()),
                ));
            }
            if let Some(t) = t.as_mut() {
                *t = traj.times[k];
            }
            let n = traj.n;
            if !q.is_null() {
                ptr::copy_nonoverlapping(traj.position(k).as_ptr(), q, n);
            }
            if !dq.is_null() {
                ptr::copy_nonoverlapping(traj.velocity(k).as_ptr(), dq, n);
            }
            Ok(())
        })())
    })
}

/// Summary of the plan as JSON, or null on failure. Release with
/// [`phaseplan_string_free`].
///
/// # Safety
/// `plan` must be null or a live plan.
#[no_mangle]
pub unsafe extern "C" fn phaseplan_plan_summary_json(plan: *const PhaseplanPlan) -> *mut c_char {
    let mut json = None;
    guard(|| {
        code((|| {
            let p = plan_ref(plan)?;
            let s = serde_json::to_string(&p.summary())
                .map_err(|e| fail(PhaseplanError::Internal, e.to_string()))?;
            json = Some(CString::new(s).map_err(|e| fail(PhaseplanError::Internal, e.to_string()))?);
            Ok(())
        })())
    });
    json.map_or(ptr::null_mut(), CString::into_raw)
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn phaseplan_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CHAIN: &str = "joint x prismatic axis=1,0,0 pos=-10,10 vel=100 acc=1\n\0";
    const TASK: &str = "init q=0\nphase go { terminal { JointConfig q_target=1\nVelocityZero } }\n\0";

    fn c(s: &str) -> *const c_char {
        s.as_ptr().cast()
    }

    fn last_error() -> String {
        unsafe { CStr::from_ptr(phaseplan_last_error()) }
            .to_string_lossy()
            .into_owned()
    }

    #[test]
    fn plans_and_reads_back() {
        let mut plan = ptr::null_mut();
        let opts = PhaseplanOptions {
            steps: 40,
            ..phaseplan_options_default()
        };
        unsafe {
            assert_eq!(phaseplan_plan(c(CHAIN), c(TASK), &opts, &mut plan), PhaseplanError::Ok);
            let mut status = PhaseplanStatus::Infeasible;
            assert_eq!(phaseplan_plan_status(plan, &mut status), PhaseplanError::Ok);
            assert_eq!(status, PhaseplanStatus::Optimal);
            assert!((phaseplan_plan_duration(plan) - 2.0).abs() < 0.04);
            assert!(phaseplan_plan_max_violation(plan) <= 1e-6);
            assert_eq!(phaseplan_plan_dof(plan), 1);
            assert_eq!(phaseplan_plan_node_count(plan), 41);
            assert_eq!(phaseplan_plan_phase_count(plan), 1);
            assert!(phaseplan_plan_iterations(plan) > 0);

            let mut ends = [0.0; 1];
            assert_eq!(phaseplan_plan_phase_end_times(plan, ends.as_mut_ptr(), 1), PhaseplanError::Ok);
            assert_eq!(ends[0], phaseplan_plan_duration(plan));

            let (mut t, mut q, mut dq) = (0.0, [0.0], [0.0]);
            assert_eq!(
                phaseplan_plan_node(plan, 40, &mut t, q.as_mut_ptr(), dq.as_mut_ptr()),
                PhaseplanError::Ok
            );
            assert_eq!(t, ends[0]);
            assert!((q[0] - 1.0).abs() < 1e-6);
            assert_eq!(
                phaseplan_plan_node(plan, 41, &mut t, ptr::null_mut(), ptr::null_mut()),
                PhaseplanError::IndexOutOfRange
            );
            assert!(last_error().contains("node 41"));

            let json = phaseplan_plan_summary_json(plan);
            let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
            phaseplan_string_free(json);
            let v: serde_json::Value = serde_json::from_str(&text).unwrap();
            assert_eq!(v["status"], "Optimal");
            assert_eq!(v["N"], 40);
            phaseplan_plan_free(plan);
        }
    }

    #[test]
    fn null_options_mean_defaults() {
        let mut plan = ptr::null_mut();
        unsafe {
            assert_eq!(phaseplan_plan(c(CHAIN), c(TASK), ptr::null(), &mut plan), PhaseplanError::Ok);
            assert_eq!(phaseplan_plan_node_count(plan), 21);
            phaseplan_plan_free(plan);
        }
    }

    #[test]
    fn errors_are_reported() {
        let mut plan = ptr::null_mut();
        unsafe {
            assert_eq!(
                phaseplan_plan(ptr::null(), c(TASK), ptr::null(), &mut plan),
                PhaseplanError::NullArgument
            );
            assert!(plan.is_null());
            assert_eq!(
                phaseplan_plan(c(CHAIN), c("init q=0\nphase go { }\n\0"), ptr::null(), &mut plan),
                PhaseplanError::Parse
            );
            assert!(last_error().starts_with("task:"));
            assert_eq!(
                phaseplan_plan(c(CHAIN), c"\xff".as_ptr(), ptr::null(), &mut plan),
                PhaseplanError::InvalidUtf8
            );
            let bad = PhaseplanOptions {
                steps: 1,
                ..phaseplan_options_default()
            };
            assert_eq!(
                phaseplan_plan(c(CHAIN), c(TASK), &bad, &mut plan),
                PhaseplanError::InvalidOption
            );
            assert!(plan.is_null());
            let mut status = PhaseplanStatus::Optimal;
            assert_eq!(phaseplan_plan_status(ptr::null(), &mut status), PhaseplanError::NullArgument);
            assert!(phaseplan_plan_duration(ptr::null()).is_nan());
            assert!(phaseplan_plan_summary_json(ptr::null()).is_null());
            phaseplan_plan_free(ptr::null_mut());
        }
    }
}
