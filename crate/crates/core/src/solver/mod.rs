//! Smooth constrained NLP solver.
//!
//! A primal-dual interior-point method using only first derivatives. The
//! Lagrangian Hessian is assembled from one small block per objective term or
//! constraint row, each taken from finite differences of that element's
//! gradient or from a damped BFGS update.

mod hessian;
mod ipm;
mod kkt;
mod prepare;

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::nlp::Nlp;

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Bound on the largest row or variable-bound violation.
    pub constraint_tol: f64,
    /// Bound on scaled dual infeasibility and complementarity.
    pub stationarity_tol: f64,
    /// Wall-clock budget in seconds. Exceeding it reports `MaxIterations`.
    pub time_limit: Option<f64>,
    /// 0 silent, 1 summary, 2 per-iteration log lines.
    pub verbosity: u8,
    /// Initial barrier parameter.
    pub mu_init: f64,
    pub hessian: HessianApproximation,
    pub line_search: LineSearch,
}

/// How trial steps are accepted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LineSearch {
    /// Accept a trial that sufficiently reduces either the constraint norm or
    /// the barrier objective and is not dominated by an earlier iterate. Falls
    /// back to the merit when no such trial is found.
    #[default]
    Filter,
    /// Exact-penalty merit with an adaptive penalty weight.
    Merit,
}

/// How second-order information is built from first derivatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HessianApproximation {
    /// Central differences of each element's gradient, one pair of gradient
    /// sweeps per group of non-overlapping variables.
    #[default]
    FiniteDifference,
    /// Damped BFGS block per element, positive semidefinite throughout.
    PartitionedBfgs,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 3000,
            constraint_tol: 1e-6,
            stationarity_tol: 1e-4,
            time_limit: None,
            verbosity: 0,
            mu_init: 0.1,
            hessian: HessianApproximation::default(),
            line_search: LineSearch::default(),
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.constraint_tol > 0.0 && self.constraint_tol.is_finite()) {
            return Err(format!("constraint_tol must be positive, got {}", self.constraint_tol));
        }
        if !(self.stationarity_tol > 0.0 && self.stationarity_tol.is_finite()) {
            return Err(format!(
                "stationarity_tol must be positive, got {}",
                self.stationarity_tol
            ));
        }
        if !(self.mu_init > 0.0 && self.mu_init.is_finite()) {
            return Err(format!("mu_init must be positive, got {}", self.mu_init));
        }
        if let Some(t) = self.time_limit {
            if !(t > 0.0) {
                return Err(format!("time_limit must be positive, got {t}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    Infeasible,
    NumericalFailure,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "Optimal",
            SolveStatus::MaxIterations => "MaxIterations",
            SolveStatus::Infeasible => "Infeasible",
            SolveStatus::NumericalFailure => "NumericalFailure",
        })
    }
}

/// One accepted step. Both merit values use the same barrier parameter and
/// penalty weight.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mu: f64,
    pub penalty: f64,
    pub merit_before: f64,
    pub merit_after: f64,
    pub alpha_primal: f64,
    pub alpha_dual: f64,
    pub objective: f64,
    pub max_violation: f64,
    pub regularization: f64,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub status: SolveStatus,
    /// Full decision vector. After an evaluation failure this is the
    /// offending iterate.
    pub z: Vec<f64>,
    pub objective: f64,
    pub max_violation: f64,
    pub iterations: usize,
    pub wall_time: f64,
    pub trace: Vec<IterationRecord>,
}

impl Solution {
    fn failed(z: Vec<f64>, start: Instant) -> Self {
        Self {
            status: SolveStatus::NumericalFailure,
            z,
            objective: f64::NAN,
            max_violation: f64::INFINITY,
            iterations: 0,
            wall_time: start.elapsed().as_secs_f64(),
            trace: Vec::new(),
        }
    }
}

/// Minimizes `nlp` from `guess`, which is clamped into the variable bounds.
pub fn solve(nlp: &Nlp, guess: &[f64], options: &SolverOptions) -> Solution {
    let start = Instant::now();
    if let Err(e) = nlp.validate() {
        log::error!("invalid problem: {e}");
        return Solution::failed(guess.to_vec(), start);
    }
    let (prep, x0) = match prepare::Prepared::new(nlp, guess) {
        Ok(p) => p,
        Err(prepare::PresolveError::EmptyBounds { variable, lower, upper }) => {
            log::warn!("variable {variable} has empty bounds [{lower}, {upper}]");
            let mut sol = Solution::failed(guess.to_vec(), start);
            sol.status = SolveStatus::Infeasible;
            sol.max_violation = nlp.max_violation(guess).unwrap_or(f64::INFINITY);
            return sol;
        }
        Err(prepare::PresolveError::ConstantRow { row, value }) => {
            log::warn!("row {row} is the constant {value}, outside its bounds");
            let mut sol = Solution::failed(guess.to_vec(), start);
            sol.status = SolveStatus::Infeasible;
            sol.max_violation = nlp.max_violation(guess).unwrap_or(f64::INFINITY);
            return sol;
        }
        Err(prepare::PresolveError::Eval(e)) => {
            log::error!("cannot evaluate problem: {e}");
            return Solution::failed(guess.to_vec(), start);
        }
    };
    let out = ipm::run(&prep, x0, options, start);
    let z = prep.expand(&out.x);
    let objective = nlp.objective_value(&z).unwrap_or(f64::NAN);
    let max_violation = match nlp.max_violation(&z) {
        Ok(v) if v.is_finite() => v,
        _ => f64::INFINITY,
    };
    let mut status = out.status;
    if status == SolveStatus::Optimal && !(max_violation <= options.constraint_tol) {
        status = SolveStatus::NumericalFailure;
    }
    if options.verbosity >= 1 {
        log::info!(
            "{status} after {} iterations: objective {objective:.9e}, max violation {max_violation:.2e}",
            out.iterations
        );
    }
    Solution {
        status,
        z,
        objective,
        max_violation,
        iterations: out.iterations,
        wall_time: start.elapsed().as_secs_f64(),
        trace: out.trace,
    }
}
