//! Direct multiple-shooting transcription of a multi-phase task into a
//! single nonlinear program.
//!
//! The state is `x = [q; qdot]` and the control is the joint acceleration, so
//! the dynamics are the double integrator `xdot = [qdot; u]`. Every phase is
//! split into `N` uniform steps of length `(T_i - T_{i-1}) / N`, the phase end
//! times `T_1..T_m` being decision variables. Consecutive nodes are tied by
//! RK4 defect rows.

use std::ops::Range;

use thiserror::Error;

use crate::exprgraph::{ExprRef, ExpressionGraph};
use crate::nlp::{ConstraintRow, Nlp};
use crate::robot::FkError;
use crate::task::{lower_constraint, ConstraintSpec, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TranscribeParams {
    /// Steps per phase.
    pub steps: usize,
    /// Minimum phase duration in seconds.
    pub min_phase_duration: f64,
    pub w_vel: f64,
    pub w_acc: f64,
    /// Phase duration used by [`default_initial_guess`].
    pub guess_phase_duration: f64,
}

impl Default for TranscribeParams {
    fn default() -> Self {
        Self {
            steps: 20,
            min_phase_duration: 0.05,
            w_vel: 1e-3,
            w_acc: 1e-3,
            guess_phase_duration: 1.0,
        }
    }
}

impl TranscribeParams {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TranscribeError> {
        let bad = |what: &str| Err(TranscribeError::Params(what.to_string()));
        if self.steps < 2 {
            return bad("steps per phase must be at least 2");
        }
        if !(self.min_phase_duration > 0.0) {
            return bad("minimum phase duration must be positive");
        }
        if !(self.w_vel >= 0.0 && self.w_acc >= 0.0) {
            return bad("regularization weights must be nonnegative");
        }
        if !(self.guess_phase_duration >= self.min_phase_duration) {
            return bad("guessed phase duration must be at least the minimum phase duration");
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TranscribeError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("phase {phase}: {source}")]
    Lowering { phase: usize, source: FkError },
    #[error("decision vector has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("phase {phase} ends at {end} s, not after its start {start} s")]
    NonIncreasingTimes { phase: usize, start: f64, end: f64 },
}

/// Index map of the decision vector
/// `[x_0 .. x_{mN}, u_0 .. u_{mN-1}, T_1 .. T_m]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecisionLayout {
    /// Joints.
    pub n: usize,
    /// Phases.
    pub m: usize,
    /// Steps per phase.
    pub steps: usize,
}

impl DecisionLayout {
    pub fn new(n: usize, m: usize, steps: usize) -> Self {
        assert!(n >= 1 && m >= 1 && steps >= 1);
        Self { n, m, steps }
    }

    /// Number of integration steps `mN`.
    pub fn step_count(&self) -> usize {
        self.m * self.steps
    }

    /// Number of state nodes `mN + 1`.
    pub fn node_count(&self) -> usize {
        self.step_count() + 1
    }

    pub fn dimension(&self) -> usize {
        2 * self.n * self.node_count() + self.n * self.step_count() + self.m
    }

    pub fn state(&self, k: usize) -> Range<usize> {
        assert!(k < self.node_count());
        2 * self.n * k..2 * self.n * (k + 1)
    }

    pub fn position(&self, k: usize) -> Range<usize> {
        let s = self.state(k);
        s.start..s.start + self.n
    }

    pub fn velocity(&self, k: usize) -> Range<usize> {
        let s = self.state(k);
        s.start + self.n..s.end
    }

    pub fn control(&self, k: usize) -> Range<usize> {
        assert!(k < self.step_count());
        let base = 2 * self.n * self.node_count();
        base + self.n * k..base + self.n * (k + 1)
    }

    /// Index of `T_i` for 1-based phase `i`.
    pub fn phase_time(&self, i: usize) -> usize {
        assert!((1..=self.m).contains(&i));
        2 * self.n * self.node_count() + self.n * self.step_count() + i - 1
    }

    /// 1-based phase of integration step `k`.
    pub fn phase_of(&self, k: usize) -> usize {
        assert!(k < self.step_count());
        k / self.steps + 1
    }

    /// 1-based phase a state node belongs to; the final node belongs to the
    /// last phase.
    pub fn phase_of_node(&self, k: usize) -> usize {
        if k == self.step_count() {
            self.m
        } else {
            self.phase_of(k)
        }
    }
}

/// What a row of the transcribed problem encodes. Phases are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    Defect { step: usize },
    Path { node: usize, phase: usize },
    Terminal { node: usize, phase: usize },
    Ordering { phase: usize },
}

#[derive(Clone, Debug)]
pub struct NlpProblem {
    pub nlp: Nlp,
    pub layout: DecisionLayout,
    pub params: TranscribeParams,
    /// Parallel to `nlp.rows`.
    pub row_kinds: Vec<RowKind>,
}

impl NlpProblem {
    pub fn dimension(&self) -> usize {
        self.layout.dimension()
    }

    pub fn rows_of(&self, pred: impl Fn(&RowKind) -> bool) -> Vec<usize> {
        self.row_kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| pred(k))
            .map(|(i, _)| i)
            .collect()
    }

    /// Packs a trajectory back into a decision vector.
    pub fn pack(&self, traj: &Trajectory) -> Result<Vec<f64>, TranscribeError> {
        let l = &self.layout;
        if traj.states.len() != l.node_count() || traj.controls.len() != l.step_count() {
            return Err(TranscribeError::Dimension {
                expected: l.node_count(),
                got: traj.states.len(),
            });
        }
        let mut z = vec![0.0; l.dimension()];
        for (k, x) in traj.states.iter().enumerate() {
            z[l.state(k)].copy_from_slice(x);
        }
        for (k, u) in traj.controls.iter().enumerate() {
            z[l.control(k)].copy_from_slice(u);
        }
        for (i, &t) in traj.phase_end_times.iter().enumerate() {
            z[l.phase_time(i + 1)] = t;
        }
        Ok(z)
    }
}

/// One RK4 step of `xdot = f(x, u)` with step `h`.
pub fn rk4_step<F>(x: &[f64], u: &[f64], h: f64, f: F) -> Vec<f64>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let axpy = |a: f64, k: &[f64]| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect() };
    let k1 = f(x, u);
    let k2 = f(&axpy(0.5 * h, &k1), u);
    let k3 = f(&axpy(0.5 * h, &k2), u);
    let k4 = f(&axpy(h, &k3), u);
    (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Double-integrator dynamics: `x = [q; qdot]`, `xdot = [qdot; u]`.
pub fn double_integrator(x: &[f64], u: &[f64]) -> Vec<f64> {
    let n = u.len();
    debug_assert_eq!(x.len(), 2 * n);
    x[n..].iter().chain(u).copied().collect()
}

/// Symbolic RK4 step; `h` is an expression so the step can depend on free
/// phase durations.
pub fn rk4_step_expr<F>(
    g: &mut ExpressionGraph,
    x: &[ExprRef],
    u: &[ExprRef],
    h: ExprRef,
    f: F,
) -> Vec<ExprRef>
where
    F: Fn(&mut ExpressionGraph, &[ExprRef], &[ExprRef]) -> Vec<ExprRef>,
{
    let half = g.constant(0.5);
    let sixth = g.constant(1.0 / 6.0);
    let two = g.constant(2.0);
    let half_h = g.mul(half, h);
    let axpy = |g: &mut ExpressionGraph, a: ExprRef, k: &[ExprRef]| -> Vec<ExprRef> {
        x.iter()
            .zip(k)
            .map(|(&xi, &ki)| {
                let t = g.mul(a, ki);
                g.add(xi, t)
            })
            .collect()
    };
    let k1 = f(g, x, u);
    let x2 = axpy(g, half_h, &k1);
    let k2 = f(g, &x2, u);
    let x3 = axpy(g, half_h, &k2);
    let k3 = f(g, &x3, u);
    let x4 = axpy(g, h, &k3);
    let k4 = f(g, &x4, u);
    let sixth_h = g.mul(sixth, h);
    (0..x.len())
        .map(|i| {
            let a = g.mul(two, k2[i]);
            let b = g.mul(two, k3[i]);
            let s1 = g.add(k1[i], a);
            let s2 = g.add(s1, b);
            let s3 = g.add(s2, k4[i]);
            let inc = g.mul(sixth_h, s3);
            g.add(x[i], inc)
        })
        .collect()
}

fn double_integrator_expr(_: &mut ExpressionGraph, x: &[ExprRef], u: &[ExprRef]) -> Vec<ExprRef> {
    let n = u.len();
    x[n..].iter().chain(u).copied().collect()
}

/// Builds the discrete multi-phase problem.
pub fn transcribe(task: &TaskSpec, params: &TranscribeParams) -> Result<NlpProblem, TranscribeError> {
    params.validate()?;
    let n = task.dof();
    let m = task.phase_count();
    let big_n = params.steps;
    let layout = DecisionLayout::new(n, m, big_n);
    let dim = layout.dimension();

    let mut g = ExpressionGraph::new();
    let vars: Vec<ExprRef> = (0..dim).map(|_| g.new_variable()).collect();
    let at = |r: Range<usize>| vars[r].to_vec();

    // Step length of each phase, h_i = (T_i - T_{i-1}) / N.
    let inv_n = g.constant(1.0 / big_n as f64);
    let phase_times: Vec<ExprRef> = (1..=m).map(|i| vars[layout.phase_time(i)]).collect();
    let step_len: Vec<ExprRef> = (0..m)
        .map(|i| {
            let span = if i == 0 {
                phase_times[0]
            } else {
                g.sub(phase_times[i], phase_times[i - 1])
            };
            g.mul(span, inv_n)
        })
        .collect();

    let mut rows = Vec::new();
    let mut kinds = Vec::new();
    let lower = |g: &mut ExpressionGraph,
                     spec: &ConstraintSpec,
                     k: usize,
                     phase: usize|
     -> Result<Vec<ConstraintRow>, TranscribeError> {
        lower_constraint(
            spec,
            &task.chain,
            g,
            &vars[layout.position(k)],
            &vars[layout.velocity(k)],
        )
        .map_err(|source| TranscribeError::Lowering { phase, source })
    };

    for k in 0..layout.step_count() {
        let phase = layout.phase_of(k);
        let h = step_len[phase - 1];
        let next = rk4_step_expr(&mut g, &at(layout.state(k)), &at(layout.control(k)), h, double_integrator_expr);
        for (&x_next, pred) in vars[layout.state(k + 1)].iter().zip(next) {
            let defect = g.sub(x_next, pred);
            rows.push(ConstraintRow::equal(defect, 0.0));
            kinds.push(RowKind::Defect { step: k });
        }
        for spec in task.path_constraints(phase - 1) {
            for row in lower(&mut g, spec, k, phase)? {
                rows.push(row);
                kinds.push(RowKind::Path { node: k, phase });
            }
        }
    }

    for i in 1..=m {
        let node = i * big_n;
        for spec in &task.phases[i - 1].terminal {
            for row in lower(&mut g, spec, node, i)? {
                rows.push(row);
                kinds.push(RowKind::Terminal { node, phase: i });
            }
        }
    }

    for i in 1..=m {
        let span = if i == 1 {
            phase_times[0]
        } else {
            g.sub(phase_times[i - 1], phase_times[i - 2])
        };
        rows.push(ConstraintRow::at_least(span, params.min_phase_duration));
        kinds.push(RowKind::Ordering { phase: i });
    }

    // T_m + sum_k h_k (w_vel |qdot_k|^2 + w_acc |u_k|^2)
    let mut terms = vec![phase_times[m - 1]];
    if params.w_vel > 0.0 || params.w_acc > 0.0 {
        for k in 0..layout.step_count() {
            let mut parts = Vec::with_capacity(2 * n);
            for (w, range) in [
                (params.w_vel, layout.velocity(k)),
                (params.w_acc, layout.control(k)),
            ] {
                if w > 0.0 {
                    for &v in &vars[range] {
                        let sq = g.square(v);
                        parts.push(g.scale(w, sq));
                    }
                }
            }
            let effort = g.sum(&parts);
            terms.push(g.mul(step_len[layout.phase_of(k) - 1], effort));
        }
    }
    let objective = g.sum(&terms);

    let (var_lower, var_upper) = variable_bounds(task, &layout);
    let nlp = Nlp {
        graph: g,
        objective,
        rows,
        var_lower,
        var_upper,
    };
    Ok(NlpProblem {
        nlp,
        layout,
        params: *params,
        row_kinds: kinds,
    })
}

fn variable_bounds(task: &TaskSpec, layout: &DecisionLayout) -> (Vec<f64>, Vec<f64>) {
    let chain = &task.chain;
    let dim = layout.dimension();
    let mut lo = vec![f64::NEG_INFINITY; dim];
    let mut hi = vec![f64::INFINITY; dim];
    let (q_lo, q_hi) = (chain.position_lower(), chain.position_upper());
    let v_max = chain.velocity_limits();
    let a_max = chain.acceleration_limits();
    for k in 0..layout.node_count() {
        let (p, v) = (layout.position(k), layout.velocity(k));
        lo[p.clone()].copy_from_slice(&q_lo);
        hi[p].copy_from_slice(&q_hi);
        for (j, idx) in v.enumerate() {
            lo[idx] = -v_max[j];
            hi[idx] = v_max[j];
        }
    }
    for k in 0..layout.step_count() {
        for (j, idx) in layout.control(k).enumerate() {
            lo[idx] = -a_max[j];
            hi[idx] = a_max[j];
        }
    }
    for i in 1..=layout.m {
        lo[layout.phase_time(i)] = 0.0;
    }
    // x_0 = x_init, starting at rest
    for (idx, &q) in layout.position(0).zip(&task.q_init) {
        lo[idx] = q;
        hi[idx] = q;
    }
    for idx in layout.velocity(0) {
        lo[idx] = 0.0;
        hi[idx] = 0.0;
    }
    (lo, hi)
}

/// Stationary guess: every node at the initial configuration, zero velocity
/// and acceleration, phases of equal guessed duration.
pub fn default_initial_guess(
    task: &TaskSpec,
    params: &TranscribeParams,
    layout: &DecisionLayout,
) -> Vec<f64> {
    let mut z = vec![0.0; layout.dimension()];
    for k in 0..layout.node_count() {
        z[layout.position(k)].copy_from_slice(&task.q_init);
    }
    for i in 1..=layout.m {
        z[layout.phase_time(i)] = i as f64 * params.guess_phase_duration;
    }
    z
}

/// Time-stamped states and controls of a solved (or candidate) problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Joints per state.
    pub n: usize,
    pub steps_per_phase: usize,
    /// Node times, `mN + 1` entries.
    pub times: Vec<f64>,
    /// `[q; qdot]` per node.
    pub states: Vec<Vec<f64>>,
    /// Acceleration per step, `mN` entries.
    pub controls: Vec<Vec<f64>>,
    pub phase_end_times: Vec<f64>,
}

impl Trajectory {
    pub fn duration(&self) -> f64 {
        *self.phase_end_times.last().expect("trajectory has phases")
    }

    pub fn phase_count(&self) -> usize {
        self.phase_end_times.len()
    }

    pub fn position(&self, k: usize) -> &[f64] {
        &self.states[k][..self.n]
    }

    pub fn velocity(&self, k: usize) -> &[f64] {
        &self.states[k][self.n..]
    }

    /// 1-based phase a node belongs to; the final node belongs to the last
    /// phase.
    pub fn phase_of_node(&self, k: usize) -> usize {
        (k / self.steps_per_phase + 1).min(self.phase_count())
    }

    /// Nodes at intermediate phase boundaries (excludes start and end).
    pub fn boundary_nodes(&self) -> Vec<usize> {
        (1..self.phase_count())
            .map(|i| i * self.steps_per_phase)
            .collect()
    }
}

/// Node times for phase end times `ends`: uniform within each phase, with the
/// boundary nodes landing exactly on the phase end times.
pub fn node_times(ends: &[f64], steps: usize) -> Result<Vec<f64>, TranscribeError> {
    let mut times = Vec::with_capacity(ends.len() * steps + 1);
    let mut start = 0.0;
    for (i, &end) in ends.iter().enumerate() {
        if !(end > start) {
            return Err(TranscribeError::NonIncreasingTimes {
                phase: i + 1,
                start,
                end,
            });
        }
        let h = (end - start) / steps as f64;
        times.extend((0..steps).map(|j| if j == 0 { start } else { start + j as f64 * h }));
        start = end;
    }
    times.push(start);
    Ok(times)
}

pub fn extract_trajectory(problem: &NlpProblem, z: &[f64]) -> Result<Trajectory, TranscribeError> {
    let l = &problem.layout;
    if z.len() != l.dimension() {
        return Err(TranscribeError::Dimension {
            expected: l.dimension(),
            got: z.len(),
        });
    }
    let phase_end_times: Vec<f64> = (1..=l.m).map(|i| z[l.phase_time(i)]).collect();
    let times = node_times(&phase_end_times, l.steps)?;
    Ok(Trajectory {
        n: l.n,
        steps_per_phase: l.steps,
        times,
        states: (0..l.node_count()).map(|k| z[l.state(k)].to_vec()).collect(),
        controls: (0..l.step_count()).map(|k| z[l.control(k)].to_vec()).collect(),
        phase_end_times,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_census() {
        let l = DecisionLayout::new(1, 1, 5);
        assert_eq!(l.dimension(), 18);
        let l = DecisionLayout::new(2, 3, 20);
        assert_eq!(l.dimension(), 367);
        assert_eq!(
            [0, 19, 20, 39].map(|k| l.phase_of(k)),
            [1, 1, 2, 2]
        );
        assert_eq!(l.phase_of_node(60), 3);
    }

    #[test]
    fn layout_slices_partition_the_vector() {
        for (n, m, steps) in [(1, 1, 2), (2, 3, 4), (3, 2, 5)] {
            let l = DecisionLayout::new(n, m, steps);
            let mut hits = vec![0; l.dimension()];
            for k in 0..l.node_count() {
                l.state(k).for_each(|i| hits[i] += 1);
            }
            for k in 0..l.step_count() {
                l.control(k).for_each(|i| hits[i] += 1);
            }
            for i in 1..=m {
                hits[l.phase_time(i)] += 1;
            }
            assert!(hits.iter().all(|&h| h == 1));
        }
    }

    #[test]
    fn rk4_examples() {
        let step = |x: &[f64], u: f64, h: f64| rk4_step(x, &[u], h, double_integrator);
        assert_eq!(step(&[0.0, 0.0], 1.0, 1.0), vec![0.5, 1.0]);
        assert_eq!(step(&[1.0, 2.0], 0.0, 0.5), vec![2.0, 2.0]);
        let out = step(&[0.0, 0.0], 2.0, 0.1);
        assert!((out[0] - 0.01).abs() < 1e-15);
        assert!((out[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn symbolic_rk4_matches_numeric() {
        let mut g = ExpressionGraph::new();
        let x: Vec<_> = (0..4).map(|_| g.new_variable()).collect();
        let u: Vec<_> = (0..2).map(|_| g.new_variable()).collect();
        let h = g.new_variable();
        let next = rk4_step_expr(&mut g, &x, &u, h, double_integrator_expr);
        let vals = [0.3, -1.0, 0.7, 0.2, 1.5, -2.0, 0.13];
        let sym = g.evaluate(&next, &vals).unwrap();
        let num = rk4_step(&vals[..4], &vals[4..6], vals[6], double_integrator);
        for (a, b) in sym.iter().zip(&num) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn node_times_per_phase() {
        assert_eq!(node_times(&[1.0], 2).unwrap(), vec![0.0, 0.5, 1.0]);
        let t = node_times(&[1.0, 1.6], 2).unwrap();
        let want = [0.0, 0.5, 1.0, 1.3, 1.6];
        assert_eq!(t.len(), want.len());
        for (a, b) in t.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            node_times(&[1.0, 1.0], 2),
            Err(TranscribeError::NonIncreasingTimes { phase: 2, .. })
        ));
    }

    #[test]
    fn params_validation() {
        assert!(TranscribeParams::with_steps(1).validate().is_err());
        let bad = TranscribeParams {
            min_phase_duration: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(TranscribeParams::default().validate().is_ok());
    }
}
