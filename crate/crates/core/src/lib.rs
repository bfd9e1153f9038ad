//! Time-optimal planning of multi-phase robot motions.
//!
//! A task is a sequence of phases, each described by terminal and path
//! constraints on a serial kinematic chain. The whole sequence is transcribed
//! into one nonlinear program (RK4 multiple shooting over a double-integrator
//! joint model with free phase durations) and solved for minimum total time.
//! [`baseline`] solves the same phases one at a time, stopping in between.

pub mod baseline;
pub mod cli;
pub mod exprgraph;
pub mod nlp;
pub mod report;
pub mod robot;
pub mod solver;
pub mod task;
pub mod transcribe;

pub use exprgraph::{ExprRef, ExpressionGraph};
pub use nlp::{ConstraintRow, Nlp};
pub use robot::{parse_chain, KinematicChain};
pub use solver::{solve, Solution, SolveStatus, SolverOptions};
pub use task::{parse_task, ConstraintSpec, PhaseSpec, TaskSpec};
pub use transcribe::{transcribe, NlpProblem, TranscribeParams, Trajectory};
