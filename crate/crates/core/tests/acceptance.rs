//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::{build, close, interpret, planar_tip, recipe_strategy};
use phaseplan::report::{run_plan, Mode, PlanOutcome};
use phaseplan::transcribe::{default_initial_guess, double_integrator, rk4_step, RowKind};
use phaseplan::{
    parse_chain, parse_task, transcribe, KinematicChain, SolveStatus, SolverOptions, TaskSpec,
    TranscribeParams, Trajectory,
};
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SLIDER: &str = include_str!("../data/slider.chain");
const SLIDER_VLIM: &str = include_str!("../data/slider_vlim.chain");
const MOVE1: &str = include_str!("../data/move1.task");
const MOVE4: &str = include_str!("../data/move4.task");
const ARM2: &str = include_str!("../data/arm2.chain");
const ARM3: &str = include_str!("../data/arm3.chain");
const VIA2: &str = include_str!("../data/viapoints.task");
const VIA3: &str = include_str!("../data/viapoints3.task");
const LINE: &str = include_str!("../data/line.task");
const MOBILE: &str = include_str!("../data/mobile9.chain");
const PICK_PLACE: &str = include_str!("../data/pick_place.task");
const DRILLING: &str = include_str!("../data/drilling.task");

type Check = Result<String, String>;

fn load(chain: &str, task: &str) -> (KinematicChain, TaskSpec) {
    let chain = parse_chain(chain).expect("chain parses");
    let task = parse_task(task, &chain).expect("task parses");
    (chain, task)
}

fn plan(task: &TaskSpec, steps: usize, mode: Mode) -> Result<PlanOutcome, String> {
    run_plan(
        task,
        &TranscribeParams::with_steps(steps),
        &SolverOptions::default(),
        mode,
    )
    .map_err(|e| format!("{mode}: {e}"))
}

fn optimal(o: &PlanOutcome) -> Result<(), String> {
    if o.status == SolveStatus::Optimal {
        Ok(())
    } else {
        Err(format!("{} ended {}", o.mode, o.status))
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

fn bang_bang() -> Check {
    let (_, task) = load(SLIDER, MOVE1);
    let start = Instant::now();
    let o = plan(&task, 40, Mode::Joint)?;
    let wall = start.elapsed().as_secs_f64();
    optimal(&o)?;
    // rest to rest over d with |u| <= a: T = 2 sqrt(d / a)
    let (d, a) = (1.0f64, 1.0);
    let t_star = 2.0 * (d / a).sqrt();
    let t = o.trajectory.duration();
    let msg = format!("duration {t:.6} s vs {t_star} s, {wall:.2} s wall");
    if within(t, t_star, 0.02) && wall < 10.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn trapezoid() -> Check {
    let (_, task) = load(SLIDER_VLIM, MOVE4);
    let o = plan(&task, 20, Mode::Joint)?;
    optimal(&o)?;
    // cruise at v for d / v, plus v / a spent ramping up and down
    let (d, v, a) = (4.0, 1.0, 1.0);
    let t_star = d / v + v / a;
    let t = o.trajectory.duration();
    let msg = format!("duration {t:.6} s vs {t_star} s");
    if within(t, t_star, 0.02) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Largest |dq_j| / limit_j at each intermediate phase boundary.
fn boundary_speed(traj: &Trajectory, chain: &KinematicChain) -> Vec<(f64, f64)> {
    let n = chain.dof();
    let limits = chain.velocity_limits();
    (1..traj.phase_count())
        .map(|i| {
            let state = &traj.states[i * traj.steps_per_phase];
            let dq = &state[n..2 * n];
            let abs = dq.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let rel = dq
                .iter()
                .zip(&limits)
                .fold(0.0f64, |m, (v, l)| m.max(v.abs() / l));
            (abs, rel)
        })
        .collect()
}

fn joint_beats_baseline() -> Check {
    let (chain, task) = load(ARM2, VIA2);
    let joint = plan(&task, 20, Mode::Joint)?;
    let base = plan(&task, 20, Mode::Baseline)?;
    optimal(&joint)?;
    optimal(&base)?;
    let (tj, tb) = (joint.trajectory.duration(), base.trajectory.duration());
    let moving = boundary_speed(&joint.trajectory, &chain);
    let stopped = boundary_speed(&base.trajectory, &chain);
    let msg = format!(
        "joint {tj:.4} s, baseline {tb:.4} s; joint boundary speed/limit {:?}, baseline max |dq| {:?}",
        moving.iter().map(|b| format!("{:.2}", b.1)).collect::<Vec<_>>(),
        stopped.iter().map(|b| format!("{:.1e}", b.0)).collect::<Vec<_>>(),
    );
    let ok = tj <= tb - 1e-3
        && moving.len() == 2
        && moving.iter().all(|b| b.1 >= 0.05)
        && stopped.len() == 2
        && stopped.iter().all(|b| b.0 <= 1e-6);
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn sweep() -> Check {
    let (_, task) = load(ARM2, VIA2);
    let mut durations = Vec::new();
    for steps in [5, 10, 20, 30] {
        let o = plan(&task, steps, Mode::Joint)?;
        optimal(&o)?;
        durations.push(o.trajectory.duration());
    }
    let msg = format!("durations {durations:.4?} for N = 5, 10, 20, 30");
    if durations.windows(2).all(|w| w[1] <= w[0] + 1e-3) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Distance from `p` to the line through `a` and `b`, in the plane.
fn line_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let r = [p[0] - a[0], p[1] - a[1]];
    (d[0] * r[1] - d[1] * r[0]).abs() / d[0].hypot(d[1])
}

fn straight_line() -> Check {
    let (_, task) = load(ARM2, LINE);
    let o = plan(&task, 20, Mode::Joint)?;
    optimal(&o)?;
    let traj = &o.trajectory;
    let n = traj.steps_per_phase;
    let worst = (n..=2 * n)
        .map(|k| line_distance(planar_tip(&[1.0, 1.0], traj.position(k)), [1.2, 0.6], [0.6, 1.2]))
        .fold(0.0, f64::max);
    let bound = 1e-3 + SolverOptions::default().constraint_tol;
    let msg = format!("max deviation {worst:.3e} m, bound {bound:.3e} m");
    if worst <= bound {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ad_matches_differences() -> Check {
    let mut runner = TestRunner::new_with_rng(
        Config::with_cases(1000),
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    let strategy = recipe_strategy();
    let mut entries = 0;
    for case in 0..1000 {
        let (recipe, point) = strategy
            .new_tree(&mut runner)
            .map_err(|e| e.to_string())?
            .current();
        let (g, slots) = build(&recipe);
        let roots: Vec<_> = slots.iter().rev().take(3).copied().collect();
        let jac = g.jacobian(&roots, &point).map_err(|e| format!("case {case}: {e}"))?;
        for j in 0..recipe.vars {
            let h = 1e-5 * point[j].abs().max(1.0);
            let mut up = point.clone();
            let mut dn = point.clone();
            up[j] += h;
            dn[j] -= h;
            let (fu, fd) = (interpret(&recipe, &up), interpret(&recipe, &dn));
            for r in 0..roots.len() {
                let i = slots.len() - 1 - r;
                let num = (fu[i] - fd[i]) / (2.0 * h);
                if !close(jac[(r, j)], num) {
                    return Err(format!("case {case} root {r} var {j}: ad {} fd {num}", jac[(r, j)]));
                }
                entries += 1;
            }
        }
    }
    Ok(format!("1000 expressions, {entries} Jacobian entries"))
}

fn rk4_exact() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..4);
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let h = rng.gen_range(1e-3..2.0);
        let x: Vec<f64> = q.iter().chain(&v).copied().collect();
        let next = rk4_step(&x, &u, h, double_integrator);
        for j in 0..n {
            let q_exact = q[j] + h * v[j] + 0.5 * h * h * u[j];
            let v_exact = v[j] + h * u[j];
            worst = worst
                .max((next[j] - q_exact).abs() / (1.0 + q_exact.abs()))
                .max((next[n + j] - v_exact).abs() / (1.0 + v_exact.abs()));
        }
    }
    let msg = format!("1000 steps, largest relative error {worst:.1e}");
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn guess_contract() -> Check {
    let scenarios = [
        ("arm2 via-points", ARM2, VIA2),
        ("arm3 via-points", ARM3, VIA3),
        ("arm2 line", ARM2, LINE),
        ("pick and place", MOBILE, PICK_PLACE),
        ("drilling", MOBILE, DRILLING),
    ];
    let mut notes = Vec::new();
    for (name, chain, text) in scenarios {
        let (_, task) = load(chain, text);
        let params = TranscribeParams::with_steps(10);
        let problem = transcribe(&task, &params).map_err(|e| e.to_string())?;
        let z = default_initial_guess(&task, &params, &problem.layout);
        let nlp = &problem.nlp;
        let values = nlp.row_values(&z).map_err(|e| e.to_string())?;

        // initial state and box limits are variable bounds
        let outside = z
            .iter()
            .zip(nlp.var_lower.iter().zip(&nlp.var_upper))
            .filter(|&(v, (lo, hi))| !(lo <= v && v <= hi))
            .count();
        let start = &z[problem.layout.state(0)];
        let n = task.chain.dof();
        let at_init = start[..n] == task.q_init[..] && start[n..].iter().all(|v| *v == 0.0);
        let mut structural = 0.0f64;
        let mut terminal = 0.0f64;
        for (r, kind) in problem.row_kinds.iter().enumerate() {
            let v = nlp.rows[r].violation(values[r]);
            match kind {
                RowKind::Defect { .. } | RowKind::Ordering { .. } => structural = structural.max(v),
                RowKind::Terminal { .. } => terminal = terminal.max(v),
                RowKind::Path { .. } => {}
            }
        }
        if outside > 0 || !at_init || structural != 0.0 || terminal == 0.0 {
            return Err(format!(
                "{name}: {outside} bounds violated, initial state held {at_init}, \
                 defect/ordering violation {structural:e}, terminal violation {terminal:e}"
            ));
        }
        notes.push(format!("{name} terminal {terminal:.2}"));
    }
    Ok(notes.join(", "))
}

fn robot_independent() -> Check {
    let mut notes = Vec::new();
    for (name, chain, text) in [("2-link", ARM2, VIA2), ("3-link", ARM3, VIA3)] {
        let (_, task) = load(chain, text);
        let o = plan(&task, 20, Mode::Joint)?;
        let note = format!(
            "{name} {} duration {:.4} s violation {:.1e}",
            o.status,
            o.trajectory.duration(),
            o.max_violation
        );
        if o.status != SolveStatus::Optimal || o.max_violation > 1e-6 {
            return Err(note);
        }
        notes.push(note);
    }
    Ok(notes.join("; "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("acceleration-limited move is bang-bang", bang_bang),
        ("velocity-limited move is trapezoidal", trapezoid),
        ("joint plan beats phase-by-phase baseline", joint_beats_baseline),
        ("duration does not grow with N", sweep),
        ("straight-line path constraint holds", straight_line),
        ("reverse-mode derivatives match differences", ad_matches_differences),
        ("RK4 is exact for the double integrator", rk4_exact),
        ("initial guess contract", guess_contract),
        ("same task on 2- and 3-link chains", robot_independent),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {} {name}: {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail}", k + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
