//! Command-line front end.
//!
//! Exit codes: 0 when every requested solve is `Optimal`, 1 when a solve
//! stops short or fails, 2 for unreadable inputs and usage errors.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::report::{
    boundary_speeds, run_plan, write_trajectory_csv, write_velocity_profile, Mode, PlanOutcome,
};
use crate::robot::{parse_chain, KinematicChain};
use crate::solver::{SolveStatus, SolverOptions};
use crate::task::{parse_task, TaskSpec};
use crate::transcribe::TranscribeParams;

#[derive(Debug, Parser)]
#[command(name = "phaseplan", version, about = "Time-optimal multi-phase joint trajectories")]
pub struct Cli {
    /// Repeat for more solver logging.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan one task and write trajectory.csv, summary.json and velocity.csv.
    Plan(PlanArgs),
    /// Plan tasks in both modes and report durations and boundary speeds.
    Compare(CompareArgs),
    /// Plan one task jointly for several step counts.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct Numerics {
    /// Steps per phase.
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub wvel: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub wacc: f64,
    /// Minimum phase duration (s).
    #[arg(long, default_value_t = 0.05)]
    pub dtmin: f64,
    /// Constraint tolerance.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long = "max-iter", default_value_t = 3000)]
    pub max_iter: usize,
    /// Wall-clock budget per solve (s).
    #[arg(long = "time-limit")]
    pub time_limit: Option<f64>,
}

impl Numerics {
    fn params(&self, steps: usize) -> TranscribeParams {
        TranscribeParams {
            steps,
            min_phase_duration: self.dtmin,
            w_vel: self.wvel,
            w_acc: self.wacc,
            ..TranscribeParams::default()
        }
    }

    fn options(&self, verbosity: u8) -> SolverOptions {
        SolverOptions {
            max_iterations: self.max_iter,
            constraint_tol: self.tol,
            time_limit: self.time_limit,
            verbosity,
            ..SolverOptions::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub chain: PathBuf,
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, default_value = "joint")]
    pub mode: Mode,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub numerics: Numerics,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub chain: PathBuf,
    /// One or more scenario files.
    #[arg(long, required = true, num_args = 1..)]
    pub task: Vec<PathBuf>,
    /// Directory for compare.csv, improvement.csv and boundary_velocity.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub numerics: Numerics,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub chain: PathBuf,
    #[arg(long)]
    pub task: PathBuf,
    /// Comma-separated steps per phase.
    #[arg(long = "steps-list", value_delimiter = ',', default_value = "5,10,20,30")]
    pub steps_list: Vec<usize>,
    /// Output file; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub numerics: Numerics,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: String) -> Self {
        Self { code: 2, message }
    }

    fn solve(message: String) -> Self {
        Self { code: 1, message }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn load_chain(path: &Path) -> Result<KinematicChain, Failure> {
    parse_chain(&read(path)?).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn load_task(path: &Path, chain: &KinematicChain) -> Result<TaskSpec, Failure> {
    parse_task(&read(path)?, chain).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn output_error(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::input(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| output_error(path, e))
}

fn plan_once(
    task: &TaskSpec,
    n: &Numerics,
    steps: usize,
    mode: Mode,
    verbosity: u8,
) -> Result<PlanOutcome, Failure> {
    let params = n.params(steps);
    params
        .validate()
        .map_err(|e| Failure::input(e.to_string()))?;
    let options = n.options(verbosity);
    options.validate().map_err(Failure::input)?;
    run_plan(task, &params, &options, mode).map_err(|e| Failure::solve(format!("{mode}: {e}")))
}

fn cmd_plan(a: &PlanArgs, verbosity: u8) -> Result<u8, Failure> {
    let chain = load_chain(&a.chain)?;
    let task = load_task(&a.task, &chain)?;
    let outcome = plan_once(&task, &a.numerics, a.numerics.steps, a.mode, verbosity)?;
    fs::create_dir_all(&a.out).map_err(|e| output_error(&a.out, e))?;

    let path = a.out.join("trajectory.csv");
    write_trajectory_csv(create(&path)?, &outcome.trajectory).map_err(|e| output_error(&path, e))?;
    let path = a.out.join("velocity.csv");
    write_velocity_profile(create(&path)?, &outcome.trajectory, &chain)
        .map_err(|e| output_error(&path, e))?;
    let path = a.out.join("summary.json");
    let mut json = serde_json::to_string_pretty(&outcome.summary()).expect("summary serializes");
    json.push('\n');
    fs::write(&path, json).map_err(|e| output_error(&path, e))?;

    println!(
        "{}: {} duration {:.6} s, max violation {:.3e}, {} iterations, {:.3} s",
        outcome.mode,
        outcome.status,
        outcome.trajectory.duration(),
        outcome.max_violation,
        outcome.iterations,
        outcome.compute_s
    );
    Ok(if outcome.status == SolveStatus::Optimal { 0 } else { 1 })
}

fn task_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_compare(a: &CompareArgs, verbosity: u8) -> Result<u8, Failure> {
    let chain = load_chain(&a.chain)?;
    let tasks = a
        .task
        .iter()
        .map(|p| Ok((task_label(p), load_task(p, &chain)?)))
        .collect::<Result<Vec<_>, Failure>>()?;

    let mut table = String::from("task,mode,duration_s,compute_s,max_violation\n");
    let mut improvement = String::from("task,joint_s,baseline_s,improvement_pct\n");
    let mut speeds = String::from("task,mode,boundary,node,t,max_abs_dq,max_normalized\n");
    let mut code = 0;
    for (label, task) in &tasks {
        let mut durations = [f64::NAN; 2];
        for (slot, mode) in [Mode::Joint, Mode::Baseline].into_iter().enumerate() {
            let outcome = plan_once(task, &a.numerics, a.numerics.steps, mode, verbosity)?;
            if outcome.status != SolveStatus::Optimal {
                eprintln!("{label} ({mode}): solver stopped with {}", outcome.status);
                code = 1;
            }
            let t = &outcome.trajectory;
            durations[slot] = t.duration();
            writeln!(
                table,
                "{label},{mode},{},{},{}",
                t.duration(),
                outcome.compute_s,
                outcome.max_violation
            )
            .unwrap();
            for b in boundary_speeds(t, &chain) {
                writeln!(
                    speeds,
                    "{label},{mode},{},{},{},{},{}",
                    b.boundary, b.node, b.t, b.max_abs_dq, b.max_normalized
                )
                .unwrap();
            }
        }
        let [joint, baseline] = durations;
        let pct = 100.0 * (baseline - joint) / baseline;
        writeln!(improvement, "{label},{joint},{baseline},{pct}").unwrap();
        println!("{label}: joint {joint:.4} s, baseline {baseline:.4} s, improvement {pct:.1}%");
    }

    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| output_error(dir, e))?;
            for (name, body) in [
                ("compare.csv", &table),
                ("improvement.csv", &improvement),
                ("boundary_velocity.csv", &speeds),
            ] {
                let path = dir.join(name);
                fs::write(&path, body).map_err(|e| output_error(&path, e))?;
            }
        }
        None => print!("{table}\n{improvement}\n{speeds}"),
    }
    Ok(code)
}

fn cmd_sweep(a: &SweepArgs, verbosity: u8) -> Result<u8, Failure> {
    if let Some(&bad) = a.steps_list.iter().find(|&&s| s < 2) {
        return Err(Failure::input(format!("steps per phase must be at least 2, got {bad}")));
    }
    let chain = load_chain(&a.chain)?;
    let task = load_task(&a.task, &chain)?;
    let mut steps = a.steps_list.clone();
    steps.sort_unstable();
    steps.dedup();

    // one after another so that compute times are comparable
    let mut body = String::from("N,duration_s,compute_s,status\n");
    let mut code = 0;
    for &s in &steps {
        match plan_once(&task, &a.numerics, s, Mode::Joint, verbosity) {
            Ok(o) => {
                if o.status != SolveStatus::Optimal {
                    code = 1;
                }
                writeln!(body, "{s},{},{},{}", o.trajectory.duration(), o.compute_s, o.status)
                    .unwrap();
            }
            Err(f) => {
                eprintln!("N={s}: {}", f.message);
                code = 1;
                writeln!(body, "{s},,,Error").unwrap();
            }
        }
    }
    match &a.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| output_error(dir, e))?;
            }
            fs::write(path, &body).map_err(|e| output_error(path, e))?;
        }
        None => print!("{body}"),
    }
    Ok(code)
}

pub fn run(cli: &Cli) -> ExitCode {
    let verbosity = cli.verbose;
    let result = match &cli.command {
        Command::Plan(a) => cmd_plan(a, verbosity),
        Command::Compare(a) => cmd_compare(a, verbosity),
        Command::Sweep(a) => cmd_sweep(a, verbosity),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        _ => "info",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    run(&cli)
}
