//! Running a plan in either mode and writing its results.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading a
//! trajectory back yields bit-identical values.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{solve_sequential, BaselineError};
use crate::robot::KinematicChain;
use crate::solver::{solve, SolveStatus, SolverOptions};
use crate::task::TaskSpec;
use crate::transcribe::{
    default_initial_guess, extract_trajectory, node_times, transcribe, NlpProblem,
    TranscribeError, TranscribeParams, Trajectory,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Joint,
    Baseline,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Joint => "joint",
            Mode::Baseline => "baseline",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Mode::Joint),
            "baseline" => Ok(Mode::Baseline),
            other => Err(format!("unknown mode `{other}` (expected joint or baseline)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Transcribe(#[from] TranscribeError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("constraint evaluation failed: {0}")]
    Evaluation(String),
}

#[derive(Clone, Debug)]
pub struct PlanOutcome {
    pub mode: Mode,
    pub status: SolveStatus,
    pub trajectory: Trajectory,
    pub objective: f64,
    /// Worst violation of the full task's rows and bounds at `trajectory`.
    pub max_violation: f64,
    pub iterations: usize,
    pub compute_s: f64,
}

impl PlanOutcome {
    pub fn summary(&self) -> Summary {
        let t = &self.trajectory;
        Summary {
            mode: self.mode,
            n: t.n,
            m: t.phase_count(),
            steps: t.steps_per_phase,
            duration_s: t.duration(),
            phase_end_times_s: t.phase_end_times.clone(),
            objective: self.objective,
            max_violation: self.max_violation,
            iterations: self.iterations,
            compute_s: self.compute_s,
            status: self.status,
        }
    }
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "N")]
    pub steps: usize,
    pub duration_s: f64,
    pub phase_end_times_s: Vec<f64>,
    pub objective: f64,
    pub max_violation: f64,
    pub iterations: usize,
    pub compute_s: f64,
    pub status: SolveStatus,
}

/// Worst violation of the joint transcription of `task` at `traj`.
pub fn trajectory_violation(
    problem: &NlpProblem,
    traj: &Trajectory,
) -> Result<f64, PlanError> {
    let z = problem.pack(traj)?;
    problem
        .nlp
        .max_violation(&z)
        .map_err(|e| PlanError::Evaluation(e.to_string()))
}

/// Plans `task` in `mode`. A solver that stops short of optimality still
/// yields an outcome; only a baseline phase that fails outright is an error.
pub fn run_plan(
    task: &TaskSpec,
    params: &TranscribeParams,
    options: &SolverOptions,
    mode: Mode,
) -> Result<PlanOutcome, PlanError> {
    let problem = transcribe(task, params)?;
    let start = Instant::now();
    let (trajectory, status, objective, iterations) = match mode {
        Mode::Joint => {
            let guess = default_initial_guess(task, params, &problem.layout);
            let sol = solve(&problem.nlp, &guess, options);
            let traj = extract_trajectory(&problem, &sol.z)?;
            (traj, sol.status, sol.objective, sol.iterations)
        }
        Mode::Baseline => {
            let plan = solve_sequential(task, params, options)?;
            let (status, objective, iterations) =
                (plan.status(), plan.objective(), plan.iterations());
            (plan.trajectory, status, objective, iterations)
        }
    };
    let compute_s = start.elapsed().as_secs_f64();
    let max_violation = trajectory_violation(&problem, &trajectory)?;
    Ok(PlanOutcome {
        mode,
        status,
        trajectory,
        objective,
        max_violation,
        iterations,
        compute_s,
    })
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |j| format!("{prefix}_{j}"))
}

pub fn write_trajectory_csv<W: Write>(out: W, traj: &Trajectory) -> csv::Result<()> {
    let n = traj.n;
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = ["k", "t", "phase"]
        .into_iter()
        .map(String::from)
        .chain(indexed("q", n))
        .chain(indexed("dq", n))
        .chain(indexed("u", n))
        .collect();
    w.write_record(&header)?;
    for (k, x) in traj.states.iter().enumerate() {
        let mut rec = vec![k.to_string(), num(traj.times[k]), traj.phase_of_node(k).to_string()];
        rec.extend(x.iter().map(|&v| num(v)));
        match traj.controls.get(k) {
            Some(u) => rec.extend(u.iter().map(|&v| num(v))),
            None => rec.extend(std::iter::repeat_n(String::new(), n)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("row {row}: {message}")]
    Format { row: usize, message: String },
}

/// Reads a trajectory written by [`write_trajectory_csv`].
pub fn read_trajectory_csv<R: Read>(input: R) -> Result<Trajectory, ReadError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let bad = |row: usize, message: String| ReadError::Format { row, message };
    if header.len() < 6 || (header.len() - 3) % 3 != 0 {
        return Err(bad(0, format!("unexpected column count {}", header.len())));
    }
    let n = (header.len() - 3) / 3;
    let mut times = Vec::new();
    let mut phases = Vec::new();
    let mut states = Vec::new();
    let mut controls = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64, ReadError> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| bad(row + 1, format!("column {}: {e}", &header[i])))
        };
        times.push(field(1)?);
        phases.push(
            rec[2]
                .parse::<usize>()
                .map_err(|e| bad(row + 1, format!("phase: {e}")))?,
        );
        states.push((3..3 + 2 * n).map(field).collect::<Result<Vec<_>, _>>()?);
        if rec[3 + 2 * n].is_empty() {
            continue;
        }
        controls.push((3 + 2 * n..3 + 3 * n).map(field).collect::<Result<Vec<_>, _>>()?);
    }
    let m = phases.iter().copied().max().unwrap_or(0);
    if m == 0 || states.len() < 2 || (states.len() - 1) % m != 0 {
        return Err(bad(0, format!("{} rows do not form {m} equal phases", states.len())));
    }
    let steps = (states.len() - 1) / m;
    if controls.len() != m * steps {
        return Err(bad(0, format!("expected {} control rows", m * steps)));
    }
    let phase_end_times: Vec<f64> = (1..=m).map(|i| times[i * steps]).collect();
    let expected = node_times(&phase_end_times, steps).map_err(|e| bad(0, e.to_string()))?;
    if expected != times {
        return Err(bad(0, "node times are not uniform within phases".into()));
    }
    Ok(Trajectory {
        n,
        steps_per_phase: steps,
        times,
        states,
        controls,
        phase_end_times,
    })
}

/// Joint velocities divided by each joint's limit, one row per node.
pub fn write_velocity_profile<W: Write>(
    out: W,
    traj: &Trajectory,
    chain: &KinematicChain,
) -> csv::Result<()> {
    let limits = chain.velocity_limits();
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = ["k", "t", "phase"]
        .into_iter()
        .map(String::from)
        .chain(indexed("v", traj.n))
        .collect();
    w.write_record(&header)?;
    for k in 0..traj.states.len() {
        let mut rec = vec![k.to_string(), num(traj.times[k]), traj.phase_of_node(k).to_string()];
        rec.extend(
            traj.velocity(k)
                .iter()
                .zip(&limits)
                .map(|(v, lim)| num(v / lim)),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Speeds at one intermediate phase boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundarySpeed {
    /// 1-based index of the phase that ends here.
    pub boundary: usize,
    pub node: usize,
    pub t: f64,
    pub max_abs_dq: f64,
    /// Largest `|dq_j| / vel_limit_j`.
    pub max_normalized: f64,
}

pub fn boundary_speeds(traj: &Trajectory, chain: &KinematicChain) -> Vec<BoundarySpeed> {
    let limits = chain.velocity_limits();
    traj.boundary_nodes()
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let dq = traj.velocity(k);
            BoundarySpeed {
                boundary: i + 1,
                node: k,
                t: traj.times[k],
                max_abs_dq: dq.iter().fold(0.0, |a, v| a.max(v.abs())),
                max_normalized: dq
                    .iter()
                    .zip(&limits)
                    .fold(0.0, |a, (v, l)| a.max(v.abs() / l)),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trajectory {
        let phase_end_times = vec![0.3, 1.0 / 3.0 + 0.7];
        Trajectory {
            n: 2,
            steps_per_phase: 2,
            times: node_times(&phase_end_times, 2).unwrap(),
            states: (0..5)
                .map(|k| vec![k as f64 * 0.1, -1e-17, 1.0 / (k as f64 + 3.0), 2.5e300])
                .collect(),
            controls: (0..4).map(|k| vec![k as f64, -0.5]).collect(),
            phase_end_times,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let traj = sample();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "k,t,phase,q_1,q_2,dq_1,dq_2,u_1,u_2");
        assert!(text.lines().last().unwrap().ends_with(",,"));
        assert_eq!(text.lines().count(), 6);
        let back = read_trajectory_csv(buf.as_slice()).unwrap();
        assert_eq!(back, traj);
    }

    #[test]
    fn phase_column_assigns_final_node_to_last_phase() {
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &sample()).unwrap();
        let phases: Vec<&str> = std::str::from_utf8(&buf)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap())
            .collect();
        assert_eq!(phases, ["1", "1", "2", "2", "2"]);
    }

    #[test]
    fn summary_uses_expected_keys() {
        let outcome = PlanOutcome {
            mode: Mode::Baseline,
            status: SolveStatus::Optimal,
            trajectory: sample(),
            objective: 1.0,
            max_violation: 0.0,
            iterations: 3,
            compute_s: 0.5,
        };
        let v = serde_json::to_value(outcome.summary()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "N", "compute_s", "duration_s", "iterations", "m", "max_violation", "mode", "n",
                "objective", "phase_end_times_s", "status"
            ]
        );
        assert_eq!(v["mode"], "baseline");
        assert_eq!(v["N"], 2);
    }

    #[test]
    fn rejects_ragged_phases() {
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.remove(2);
        let joined = lines.join("\n");
        assert!(read_trajectory_csv(joined.as_bytes()).is_err());
    }
}
