//! Phase-by-phase comparison planner.
//!
//! Each phase is solved on its own, starting at rest from where the previous
//! phase ended and required to come to rest at its end. The pieces are then
//! joined into one trajectory.

use thiserror::Error;

use crate::solver::{solve, Solution, SolveStatus, SolverOptions};
use crate::task::{ConstraintSpec, PhaseSpec, TaskError, TaskSpec};
use crate::transcribe::{
    default_initial_guess, extract_trajectory, transcribe, TranscribeError, TranscribeParams,
    Trajectory,
};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("phase {index} (`{name}`): {source}")]
    Task {
        index: usize,
        name: String,
        source: TaskError,
    },
    #[error("phase {index} (`{name}`): {source}")]
    Transcribe {
        index: usize,
        name: String,
        source: TranscribeError,
    },
    #[error("phase {index} (`{name}`) could not be solved: {status}")]
    PhaseFailed {
        index: usize,
        name: String,
        status: SolveStatus,
        /// Phases solved before the failure.
        completed: Vec<PhaseResult>,
    },
}

/// One solved phase.
#[derive(Clone, Debug)]
pub struct PhaseResult {
    pub name: String,
    pub solution: Solution,
    /// Phase trajectory with times starting at zero.
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug)]
pub struct SequentialPlan {
    pub trajectory: Trajectory,
    pub phases: Vec<PhaseResult>,
}

impl SequentialPlan {
    /// `Optimal` only if every phase is; otherwise the first other status.
    pub fn status(&self) -> SolveStatus {
        self.phases
            .iter()
            .map(|p| p.solution.status)
            .find(|s| *s != SolveStatus::Optimal)
            .unwrap_or(SolveStatus::Optimal)
    }

    pub fn objective(&self) -> f64 {
        self.phases.iter().map(|p| p.solution.objective).sum()
    }

    pub fn iterations(&self) -> usize {
        self.phases.iter().map(|p| p.solution.iterations).sum()
    }

    pub fn wall_time(&self) -> f64 {
        self.phases.iter().map(|p| p.solution.wall_time).sum()
    }
}

fn stop() -> ConstraintSpec {
    ConstraintSpec::VelocityZero { tol: 0.0 }
}

/// Single-phase task for phase `i` of `task`, starting at rest at `q_start`.
pub fn phase_task(task: &TaskSpec, i: usize, q_start: &[f64]) -> Result<TaskSpec, TaskError> {
    let phase = &task.phases[i];
    let mut terminal = phase.terminal.clone();
    if !terminal.contains(&stop()) {
        terminal.push(stop());
    }
    TaskSpec::new(
        task.chain.clone(),
        q_start.to_vec(),
        vec![PhaseSpec {
            name: phase.name.clone(),
            terminal,
            path: phase.path.clone(),
        }],
        task.global_path.clone(),
    )
}

/// Solves the phases of `task` one after another with the same number of
/// steps per phase.
///
/// A phase that ends `Infeasible` or `NumericalFailure` aborts the plan. A
/// phase stopped by the iteration or time budget is kept and reported through
/// [`SequentialPlan::status`].
pub fn solve_sequential(
    task: &TaskSpec,
    params: &TranscribeParams,
    options: &SolverOptions,
) -> Result<SequentialPlan, BaselineError> {
    let mut q = task.q_init.clone();
    let mut phases: Vec<PhaseResult> = Vec::with_capacity(task.phase_count());
    for (index, spec) in task.phases.iter().enumerate() {
        let name = spec.name.clone();
        let sub = phase_task(task, index, &q).map_err(|source| BaselineError::Task {
            index,
            name: name.clone(),
            source,
        })?;
        let problem = transcribe(&sub, params).map_err(|source| BaselineError::Transcribe {
            index,
            name: name.clone(),
            source,
        })?;
        let guess = default_initial_guess(&sub, params, &problem.layout);
        let solution = solve(&problem.nlp, &guess, options);
        if matches!(
            solution.status,
            SolveStatus::Infeasible | SolveStatus::NumericalFailure
        ) {
            return Err(BaselineError::PhaseFailed {
                index,
                name,
                status: solution.status,
                completed: phases,
            });
        }
        let trajectory =
            extract_trajectory(&problem, &solution.z).map_err(|source| BaselineError::Transcribe {
                index,
                name: name.clone(),
                source,
            })?;
        q = trajectory.position(trajectory.states.len() - 1).to_vec();
        phases.push(PhaseResult {
            name,
            solution,
            trajectory,
        });
    }
    let trajectory = concatenate(phases.iter().map(|p| &p.trajectory));
    Ok(SequentialPlan { trajectory, phases })
}

/// Joins single-phase trajectories end to start, shifting times. The first
/// node of each later piece duplicates the last node of the previous one and
/// is dropped.
pub fn concatenate<'a>(pieces: impl IntoIterator<Item = &'a Trajectory>) -> Trajectory {
    let mut out: Option<Trajectory> = None;
    for piece in pieces {
        match &mut out {
            None => out = Some(piece.clone()),
            Some(acc) => {
                let offset = acc.duration();
                acc.times.extend(piece.times[1..].iter().map(|t| t + offset));
                acc.states.extend(piece.states[1..].iter().cloned());
                acc.controls.extend(piece.controls.iter().cloned());
                acc.phase_end_times
                    .extend(piece.phase_end_times.iter().map(|t| t + offset));
            }
        }
    }
    out.expect("at least one phase")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot::parse_chain;
    use crate::task::parse_task;

    const SLIDER: &str = "joint x prismatic axis=1,0,0 pos=-10,10 vel=100 acc=1\n";

    #[test]
    fn stop_is_added_once() {
        let chain = parse_chain(SLIDER).unwrap();
        let task = parse_task(
            "init q=0\nphase a { terminal { JointConfig q_target=1 } }\nphase b { terminal { JointConfig q_target=0\nVelocityZero } }\n",
            &chain,
        )
        .unwrap();
        let a = phase_task(&task, 0, &[0.0]).unwrap();
        assert_eq!(a.phases[0].terminal.len(), 2);
        let b = phase_task(&task, 1, &[1.0]).unwrap();
        assert_eq!(b.phases[0].terminal, task.phases[1].terminal);
        assert_eq!(b.q_init, vec![1.0]);
    }

    #[test]
    fn two_rest_to_rest_moves() {
        let chain = parse_chain(SLIDER).unwrap();
        let task = parse_task(
            "init q=0\nphase out { terminal { JointConfig q_target=1 } }\nphase back { terminal { JointConfig q_target=0 } }\n",
            &chain,
        )
        .unwrap();
        let plan = solve_sequential(
            &task,
            &TranscribeParams::with_steps(20),
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(plan.status(), SolveStatus::Optimal);
        let traj = &plan.trajectory;
        assert_eq!(traj.states.len(), 41);
        assert_eq!(traj.controls.len(), 40);
        // each leg is a unit rest-to-rest move, 2 s when |u| <= 1
        assert!((traj.duration() - 4.0).abs() < 0.08, "{}", traj.duration());
        let k = traj.boundary_nodes()[0];
        assert_eq!(traj.velocity(k), &[0.0]);
        assert_eq!(traj.times[k], traj.phase_end_times[0]);
        assert!((traj.position(k)[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn infeasible_phase_is_named() {
        // the second target lies outside the joint range
        let chain = parse_chain("joint x prismatic axis=1,0,0 pos=-1,1 vel=10 acc=1\n").unwrap();
        let task = parse_task(
            "init q=0\nphase ok { terminal { PointAt link=x target=0.5,0,0 } }\nphase far { terminal { PointAt link=x target=3,0,0 } }\n",
            &chain,
        )
        .unwrap();
        let opts = SolverOptions {
            max_iterations: 300,
            ..Default::default()
        };
        match solve_sequential(&task, &TranscribeParams::with_steps(5), &opts) {
            Err(BaselineError::PhaseFailed {
                index, name, completed, ..
            }) => {
                assert_eq!(index, 1);
                assert_eq!(name, "far");
                assert_eq!(completed.len(), 1);
            }
            other => panic!("expected a phase failure, got {other:?}"),
        }
    }
}
