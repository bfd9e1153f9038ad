//! Constraint-based task descriptions: an ordered sequence of motion phases,
//! each ending when its terminal constraints hold and constrained throughout
//! by its path constraints.
//!
//! Scenario files look like
//!
//! ```text
//! init q=0.1,0.2
//! global {
//!   BoxRegion link=j2 lower=-3,-3,-1 upper=3,3,1
//! }
//! phase reach {
//!   terminal {
//!     PointAt link=j2 target=1,1,0
//!   }
//!   path {
//!     LineTrack link=j2 a=0,0,0 b=1,1,0 tol=1e-3
//!   }
//! }
//! ```
//!
//! Global path constraints apply in every phase. Omitted tolerances default to
//! 0 for `PointAt`, `VelocityZero` and `JointConfig`, 1e-3 m for `LineTrack` and
//! 1e-2 rad for `AxisAlign`.

use std::fmt;

use thiserror::Error;

use crate::exprgraph::{ExprRef, ExpressionGraph};
use crate::nlp::ConstraintRow;
use crate::robot::{norm, parse_number, parse_vec, FkError, KinematicChain, Vec3};

pub const DEFAULT_LINE_TOL: f64 = 1e-3;
pub const DEFAULT_AXIS_TOL: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub enum ConstraintSpec {
    /// Link origin within `tol` of `target` along every world axis.
    PointAt { link: String, target: Vec3, tol: f64 },
    /// Every joint speed at most `tol`.
    VelocityZero { tol: f64 },
    /// Every joint within `tol` of `q_target`.
    JointConfig { q_target: Vec<f64>, tol: f64 },
    /// Link origin within `tol` of the infinite line through `a` and `b`.
    LineTrack {
        link: String,
        a: Vec3,
        b: Vec3,
        tol: f64,
    },
    /// Link origin inside the axis-aligned box.
    BoxRegion {
        link: String,
        lower: Vec3,
        upper: Vec3,
    },
    /// Angle between the link's `local_axis` and `world_dir` at most `tol`.
    AxisAlign {
        link: String,
        local_axis: Vec3,
        world_dir: Vec3,
        tol: f64,
    },
}

impl ConstraintSpec {
    pub fn keyword(&self) -> &'static str {
        match self {
            ConstraintSpec::PointAt { .. } => "PointAt",
            ConstraintSpec::VelocityZero { .. } => "VelocityZero",
            ConstraintSpec::JointConfig { .. } => "JointConfig",
            ConstraintSpec::LineTrack { .. } => "LineTrack",
            ConstraintSpec::BoxRegion { .. } => "BoxRegion",
            ConstraintSpec::AxisAlign { .. } => "AxisAlign",
        }
    }

    pub fn link(&self) -> Option<&str> {
        match self {
            ConstraintSpec::PointAt { link, .. }
            | ConstraintSpec::LineTrack { link, .. }
            | ConstraintSpec::BoxRegion { link, .. }
            | ConstraintSpec::AxisAlign { link, .. } => Some(link),
            ConstraintSpec::VelocityZero { .. } | ConstraintSpec::JointConfig { .. } => None,
        }
    }

    /// Number of rows [`lower_constraint`] emits for a chain with `dof` joints.
    pub fn row_count(&self, dof: usize) -> usize {
        match self {
            ConstraintSpec::PointAt { .. } | ConstraintSpec::BoxRegion { .. } => 3,
            ConstraintSpec::VelocityZero { .. } | ConstraintSpec::JointConfig { .. } => dof,
            ConstraintSpec::LineTrack { .. } => 2,
            ConstraintSpec::AxisAlign { .. } => 1,
        }
    }

    fn allowed_in_terminal(&self) -> bool {
        !matches!(
            self,
            ConstraintSpec::LineTrack { .. } | ConstraintSpec::BoxRegion { .. }
        )
    }

    fn allowed_in_path(&self) -> bool {
        !matches!(self, ConstraintSpec::VelocityZero { .. })
    }

    fn validate(&self, chain: &KinematicChain) -> Result<(), String> {
        if let Some(link) = self.link() {
            if chain.link_index(link).is_none() {
                return Err(format!("unknown link `{link}`"));
            }
        }
        let nonneg = |tol: f64| {
            if tol < 0.0 {
                Err(format!("tolerance must be nonnegative, got {tol}"))
            } else {
                Ok(())
            }
        };
        let unit = |v: Vec3, what: &str| {
            if (norm(v) - 1.0).abs() > 1e-9 {
                Err(format!("`{what}` must be a unit vector"))
            } else {
                Ok(())
            }
        };
        match self {
            ConstraintSpec::PointAt { tol, .. } | ConstraintSpec::VelocityZero { tol } => {
                nonneg(*tol)
            }
            ConstraintSpec::JointConfig { q_target, tol } => {
                if q_target.len() != chain.dof() {
                    return Err(format!(
                        "`q_target` has {} components, chain has {} joints",
                        q_target.len(),
                        chain.dof()
                    ));
                }
                nonneg(*tol)
            }
            ConstraintSpec::LineTrack { a, b, tol, .. } => {
                if a == b {
                    return Err("line endpoints `a` and `b` coincide".into());
                }
                if *tol <= 0.0 {
                    return Err(format!("line tolerance must be positive, got {tol}"));
                }
                Ok(())
            }
            ConstraintSpec::BoxRegion { lower, upper, .. } => {
                if lower.iter().zip(upper).any(|(l, u)| l >= u) {
                    return Err("box `lower` must be below `upper` in every component".into());
                }
                Ok(())
            }
            ConstraintSpec::AxisAlign {
                local_axis,
                world_dir,
                tol,
                ..
            } => {
                unit(*local_axis, "local_axis")?;
                unit(*world_dir, "world_dir")?;
                nonneg(*tol)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSpec {
    pub name: String,
    pub terminal: Vec<ConstraintSpec>,
    /// Path constraints specific to this phase; see [`TaskSpec::path_constraints`].
    pub path: Vec<ConstraintSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub chain: KinematicChain,
    pub q_init: Vec<f64>,
    pub phases: Vec<PhaseSpec>,
    pub global_path: Vec<ConstraintSpec>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl TaskSpec {
    /// Validates and assembles a task.
    pub fn new(
        chain: KinematicChain,
        q_init: Vec<f64>,
        phases: Vec<PhaseSpec>,
        global_path: Vec<ConstraintSpec>,
    ) -> Result<Self, TaskError> {
        let task = Self {
            chain,
            q_init,
            phases,
            global_path,
        };
        task.validate().map_err(TaskError::Invalid)?;
        Ok(task)
    }

    fn validate(&self) -> Result<(), String> {
        let n = self.chain.dof();
        if self.q_init.len() != n {
            return Err(format!(
                "initial configuration has {} components, chain has {n} joints",
                self.q_init.len()
            ));
        }
        for (j, (q, joint)) in self.q_init.iter().zip(self.chain.joints()).enumerate() {
            let [lo, hi] = joint.position_limits;
            if q < &lo || q > &hi {
                return Err(format!(
                    "initial position of joint {} ({q}) outside limits [{lo}, {hi}]",
                    j + 1
                ));
            }
        }
        if self.phases.is_empty() {
            return Err("task has no phases".into());
        }
        for c in &self.global_path {
            check_placement(c, Section::Path)?;
            c.validate(&self.chain)?;
        }
        for phase in &self.phases {
            if phase.terminal.is_empty() {
                return Err(format!("phase `{}` has no terminal constraints", phase.name));
            }
            for c in &phase.terminal {
                check_placement(c, Section::Terminal)
                    .and_then(|_| c.validate(&self.chain))
                    .map_err(|e| format!("phase `{}`: {e}", phase.name))?;
            }
            for c in &phase.path {
                check_placement(c, Section::Path)
                    .and_then(|_| c.validate(&self.chain))
                    .map_err(|e| format!("phase `{}`: {e}", phase.name))?;
            }
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.chain.dof()
    }

    pub fn phase_count(&self) -> usize {
        self.phases.len()
    }

    /// Path constraints in force during phase `i` (0-based): the global ones
    /// followed by the phase's own.
    pub fn path_constraints(&self, i: usize) -> impl Iterator<Item = &ConstraintSpec> {
        self.global_path.iter().chain(&self.phases[i].path)
    }

    /// Serializes to the scenario format accepted by [`parse_task`].
    pub fn to_scenario(&self) -> String {
        self.to_string()
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Section {
    Terminal,
    Path,
}

fn check_placement(c: &ConstraintSpec, section: Section) -> Result<(), String> {
    match section {
        Section::Terminal if !c.allowed_in_terminal() => Err(format!(
            "{} is a path constraint and cannot appear in a terminal section",
            c.keyword()
        )),
        Section::Path if !c.allowed_in_path() => Err(format!(
            "{} cannot appear in a path section",
            c.keyword()
        )),
        _ => Ok(()),
    }
}

struct VecDisplay<'a>(&'a [f64]);

impl fmt::Display for VecDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v:?}")?;
        }
        Ok(())
    }
}

impl fmt::Display for ConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.keyword())?;
        match self {
            ConstraintSpec::PointAt { link, target, tol } => {
                write!(f, " link={link} target={} tol={tol:?}", VecDisplay(target))
            }
            ConstraintSpec::VelocityZero { tol } => write!(f, " tol={tol:?}"),
            ConstraintSpec::JointConfig { q_target, tol } => {
                write!(f, " q_target={} tol={tol:?}", VecDisplay(q_target))
            }
            ConstraintSpec::LineTrack { link, a, b, tol } => write!(
                f,
                " link={link} a={} b={} tol={tol:?}",
                VecDisplay(a),
                VecDisplay(b)
            ),
            ConstraintSpec::BoxRegion { link, lower, upper } => write!(
                f,
                " link={link} lower={} upper={}",
                VecDisplay(lower),
                VecDisplay(upper)
            ),
            ConstraintSpec::AxisAlign {
                link,
                local_axis,
                world_dir,
                tol,
            } => write!(
                f,
                " link={link} local_axis={} world_dir={} tol={tol:?}",
                VecDisplay(local_axis),
                VecDisplay(world_dir)
            ),
        }
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "init q={}", VecDisplay(&self.q_init))?;
        if !self.global_path.is_empty() {
            writeln!(f, "global {{")?;
            for c in &self.global_path {
                writeln!(f, "  {c}")?;
            }
            writeln!(f, "}}")?;
        }
        for phase in &self.phases {
            writeln!(f, "phase {} {{", phase.name)?;
            writeln!(f, "  terminal {{")?;
            for c in &phase.terminal {
                writeln!(f, "    {c}")?;
            }
            writeln!(f, "  }}")?;
            if !phase.path.is_empty() {
                writeln!(f, "  path {{")?;
                for c in &phase.path {
                    writeln!(f, "    {c}")?;
                }
                writeln!(f, "  }}")?;
            }
            writeln!(f, "}}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Scope {
    Top,
    Global,
    Phase,
    PhaseSection(Section),
}

/// Parses a scenario file against `chain`.
pub fn parse_task(text: &str, chain: &KinematicChain) -> Result<TaskSpec, TaskError> {
    let mut q_init: Option<Vec<f64>> = None;
    let mut global = Vec::new();
    let mut phases: Vec<PhaseSpec> = Vec::new();
    let mut scope = Scope::Top;
    // An opening keyword waiting for its `{`.
    let mut pending: Option<(Scope, usize)> = None;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let err = |message: String| TaskError::Parse { line, message };
        let content = raw.split('#').next().unwrap_or("");
        let spaced = content.replace('{', " { ").replace('}', " } ");
        let tokens: Vec<&str> = spaced.split_whitespace().collect();
        let mut i = 0;
        while i < tokens.len() {
            let tok = tokens[i];
            if let Some((target, _)) = pending {
                if tok != "{" {
                    return Err(err(format!("expected `{{`, found `{tok}`")));
                }
                scope = target;
                pending = None;
                i += 1;
                continue;
            }
            match (scope, tok) {
                (_, "{") => return Err(err("unexpected `{`".into())),
                (Scope::Top, "}") => return Err(err("unmatched `}`".into())),
                (Scope::Global | Scope::Phase, "}") => {
                    scope = Scope::Top;
                    i += 1;
                }
                (Scope::PhaseSection(_), "}") => {
                    scope = Scope::Phase;
                    i += 1;
                }
                (Scope::Top, "init") => {
                    if q_init.is_some() {
                        return Err(err("duplicate `init`".into()));
                    }
                    let arg = tokens.get(i + 1).copied().unwrap_or("");
                    let value = arg
                        .strip_prefix("q=")
                        .ok_or_else(|| err("expected `init q=<v1,...,vn>`".into()))?;
                    let q = parse_list(value).map_err(err)?;
                    if q.len() != chain.dof() {
                        return Err(err(format!(
                            "`q` has {} components, chain has {} joints",
                            q.len(),
                            chain.dof()
                        )));
                    }
                    q_init = Some(q);
                    i += 2;
                }
                (Scope::Top, "global") => {
                    pending = Some((Scope::Global, line));
                    i += 1;
                }
                (Scope::Top, "phase") => {
                    let name = match tokens.get(i + 1) {
                        Some(&n) if n != "{" && n != "}" => n,
                        _ => return Err(err("expected a phase name".into())),
                    };
                    if phases.iter().any(|p| p.name == name) {
                        return Err(err(format!("duplicate phase name `{name}`")));
                    }
                    phases.push(PhaseSpec {
                        name: name.to_string(),
                        terminal: Vec::new(),
                        path: Vec::new(),
                    });
                    pending = Some((Scope::Phase, line));
                    i += 2;
                }
                (Scope::Top, other) => {
                    return Err(err(format!(
                        "expected `init`, `global` or `phase`, found `{other}`"
                    )))
                }
                (Scope::Phase, "terminal") => {
                    pending = Some((Scope::PhaseSection(Section::Terminal), line));
                    i += 1;
                }
                (Scope::Phase, "path") => {
                    pending = Some((Scope::PhaseSection(Section::Path), line));
                    i += 1;
                }
                (Scope::Phase, other) => {
                    return Err(err(format!(
                        "expected `terminal`, `path` or `}}`, found `{other}`"
                    )))
                }
                (Scope::Global | Scope::PhaseSection(_), keyword) => {
                    let end = tokens[i + 1..]
                        .iter()
                        .position(|t| *t == "{" || *t == "}")
                        .map_or(tokens.len(), |p| i + 1 + p);
                    let spec =
                        parse_constraint(keyword, &tokens[i + 1..end], chain).map_err(err)?;
                    let section = match scope {
                        Scope::PhaseSection(s) => s,
                        _ => Section::Path,
                    };
                    check_placement(&spec, section).map_err(err)?;
                    spec.validate(chain).map_err(err)?;
                    match scope {
                        Scope::Global => global.push(spec),
                        Scope::PhaseSection(Section::Terminal) => {
                            phases.last_mut().unwrap().terminal.push(spec)
                        }
                        _ => phases.last_mut().unwrap().path.push(spec),
                    }
                    i = end;
                }
            }
        }
    }
    if let Some((_, line)) = pending {
        return Err(TaskError::Parse {
            line,
            message: "missing `{`".into(),
        });
    }
    if scope != Scope::Top {
        return Err(TaskError::Parse {
            line: last_line,
            message: "unexpected end of file: unclosed `{`".into(),
        });
    }
    let q_init = q_init.ok_or_else(|| TaskError::Invalid("missing `init q=...`".into()))?;
    TaskSpec::new(chain.clone(), q_init, phases, global)
}

fn parse_list(text: &str) -> Result<Vec<f64>, String> {
    text.split(',').map(parse_number).collect()
}

fn parse_constraint(
    keyword: &str,
    args: &[&str],
    chain: &KinematicChain,
) -> Result<ConstraintSpec, String> {
    let mut pairs: Vec<(&str, &str)> = Vec::with_capacity(args.len());
    for a in args {
        let (k, v) = a
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, found `{a}`"))?;
        if pairs.iter().any(|(seen, _)| *seen == k) {
            return Err(format!("duplicate key `{k}`"));
        }
        pairs.push((k, v));
    }
    let allowed: &[&str] = match keyword {
        "PointAt" => &["link", "target", "tol"],
        "VelocityZero" => &["tol"],
        "JointConfig" => &["q_target", "tol"],
        "LineTrack" => &["link", "a", "b", "tol"],
        "BoxRegion" => &["link", "lower", "upper"],
        "AxisAlign" => &["link", "local_axis", "world_dir", "tol"],
        other => return Err(format!("unknown constraint `{other}`")),
    };
    if let Some((k, _)) = pairs.iter().find(|(k, _)| !allowed.contains(k)) {
        return Err(format!("{keyword} has no key `{k}`"));
    }
    let get = |key: &str| pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
    let req = |key: &str| get(key).ok_or_else(|| format!("{keyword} requires `{key}`"));
    let vec3 = |key: &str| -> Result<Vec3, String> {
        parse_vec::<3>(req(key)?).map_err(|e| format!("`{key}`: {e}"))
    };
    let tol = |default: f64| -> Result<f64, String> {
        get("tol").map_or(Ok(default), |v| {
            parse_number(v).map_err(|e| format!("`tol`: {e}"))
        })
    };
    let link = || req("link").map(str::to_string);
    Ok(match keyword {
        "PointAt" => ConstraintSpec::PointAt {
            link: link()?,
            target: vec3("target")?,
            tol: tol(0.0)?,
        },
        "VelocityZero" => ConstraintSpec::VelocityZero { tol: tol(0.0)? },
        "JointConfig" => {
            let q_target = parse_list(req("q_target")?).map_err(|e| format!("`q_target`: {e}"))?;
            if q_target.len() != chain.dof() {
                return Err(format!(
                    "`q_target` has {} components, chain has {} joints",
                    q_target.len(),
                    chain.dof()
                ));
            }
            ConstraintSpec::JointConfig {
                q_target,
                tol: tol(0.0)?,
            }
        }
        "LineTrack" => ConstraintSpec::LineTrack {
            link: link()?,
            a: vec3("a")?,
            b: vec3("b")?,
            tol: tol(DEFAULT_LINE_TOL)?,
        },
        "BoxRegion" => ConstraintSpec::BoxRegion {
            link: link()?,
            lower: vec3("lower")?,
            upper: vec3("upper")?,
        },
        "AxisAlign" => ConstraintSpec::AxisAlign {
            link: link()?,
            local_axis: vec3("local_axis")?,
            world_dir: vec3("world_dir")?,
            tol: tol(DEFAULT_AXIS_TOL)?,
        },
        _ => unreachable!(),
    })
}

/// Two unit vectors orthogonal to unit `dir` and to each other. The first is
/// built from the world axis least aligned with `dir`.
fn normal_basis(dir: Vec3) -> (Vec3, Vec3) {
    let k = (0..3)
        .min_by(|&i, &j| dir[i].abs().total_cmp(&dir[j].abs()))
        .expect("three axes");
    let mut e1 = [0.0; 3];
    e1[k] = 1.0;
    let along = dir[k];
    for i in 0..3 {
        e1[i] -= along * dir[i];
    }
    let len = norm(e1);
    let e1 = e1.map(|c| c / len);
    let e2 = [
        dir[1] * e1[2] - dir[2] * e1[1],
        dir[2] * e1[0] - dir[0] * e1[2],
        dir[0] * e1[1] - dir[1] * e1[0],
    ];
    (e1, e2)
}

/// Lowers a constraint to residual rows over joint positions `q` and
/// velocities `qdot` of one state.
///
/// Row counts depend only on the variant and the chain's degrees of freedom
/// (see [`ConstraintSpec::row_count`]).
pub fn lower_constraint(
    spec: &ConstraintSpec,
    chain: &KinematicChain,
    graph: &mut ExpressionGraph,
    q: &[ExprRef],
    qdot: &[ExprRef],
) -> Result<Vec<ConstraintRow>, FkError> {
    let rows = match spec {
        ConstraintSpec::PointAt { link, target, tol } => {
            let p = chain.fk_position(link, graph, q)?;
            p.iter()
                .zip(target)
                .map(|(&e, &t)| ConstraintRow::new(e, t - tol, t + tol))
                .collect()
        }
        ConstraintSpec::VelocityZero { tol } => qdot
            .iter()
            .map(|&e| ConstraintRow::new(e, -tol, *tol))
            .collect(),
        ConstraintSpec::JointConfig { q_target, tol } => q
            .iter()
            .zip(q_target)
            .map(|(&e, &t)| ConstraintRow::new(e, t - tol, t + tol))
            .collect(),
        ConstraintSpec::LineTrack { link, a, b, tol } => {
            let p = chain.fk_position(link, graph, q)?;
            let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let len = norm(d);
            let dir = d.map(|c| c / len);
            // offset from the line along two unit vectors spanning the plane
            // normal to it; a square of half-width tol/sqrt(2) fits inside
            // the tolerance disc
            let (e1, e2) = normal_basis(dir);
            let half = tol / std::f64::consts::SQRT_2;
            [e1, e2]
                .into_iter()
                .map(|e| {
                    let terms: Vec<ExprRef> =
                        (0..3).map(|i| graph.scale(e[i], p[i])).collect();
                    let proj = graph.sum(&terms);
                    let offset: f64 = (0..3).map(|i| e[i] * a[i]).sum();
                    let k = graph.constant(offset);
                    let r = graph.sub(proj, k);
                    ConstraintRow::new(r, -half, half)
                })
                .collect()
        }
        ConstraintSpec::BoxRegion { link, lower, upper } => {
            let p = chain.fk_position(link, graph, q)?;
            (0..3)
                .map(|i| ConstraintRow::new(p[i], lower[i], upper[i]))
                .collect()
        }
        ConstraintSpec::AxisAlign {
            link,
            local_axis,
            world_dir,
            tol,
        } => {
            let axis = chain.fk_axis(link, *local_axis, graph, q)?;
            let dir: Vec<ExprRef> = world_dir.iter().map(|&c| graph.constant(c)).collect();
            let cosine = graph.dot(&axis, &dir);
            vec![ConstraintRow::at_least(cosine, tol.cos())]
        }
    };
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot::parse_chain;

    pub(crate) const PLANAR2: &str = "\
joint j1 revolute axis=0,0,1 origin=1,0,0 pos=-3.14,3.14 vel=2 acc=5
joint j2 revolute axis=0,0,1 origin=1,0,0 pos=-3.14,3.14 vel=2 acc=5
";

    const VIA: &str = "\
# two via points, then home
init q=0,0.5
global {
  BoxRegion link=j2 lower=-3,-3,-1 upper=3,3,1
}
phase first { terminal { PointAt link=j2 target=1,1,0 } }
phase second {
  terminal {
    PointAt link=j2 target=0,1.5,0 tol=0.01
  }
  path {
    LineTrack link=j2 a=1,1,0 b=0,1.5,0
  }
}
phase home {
  terminal {
    JointConfig q_target=0,0.5
    VelocityZero
  }
}
";

    fn chain() -> KinematicChain {
        parse_chain(PLANAR2).unwrap()
    }

    #[test]
    fn parses_phases_in_order_with_defaults() {
        let task = parse_task(VIA, &chain()).unwrap();
        assert_eq!(task.phase_count(), 3);
        let names: Vec<_> = task.phases.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["first", "second", "home"]);
        assert_eq!(task.q_init, vec![0.0, 0.5]);
        assert_eq!(
            task.phases[0].terminal[0],
            ConstraintSpec::PointAt {
                link: "j2".into(),
                target: [1.0, 1.0, 0.0],
                tol: 0.0
            }
        );
        assert!(matches!(
            task.phases[1].path[0],
            ConstraintSpec::LineTrack { tol, .. } if tol == DEFAULT_LINE_TOL
        ));
        assert_eq!(task.phases[2].terminal[1], ConstraintSpec::VelocityZero { tol: 0.0 });
        // the global box applies in every phase, ahead of phase-specific rows
        assert_eq!(task.path_constraints(0).count(), 1);
        let second: Vec<_> = task.path_constraints(1).map(|c| c.keyword()).collect();
        assert_eq!(second, ["BoxRegion", "LineTrack"]);
    }

    #[test]
    fn scenario_round_trips() {
        let task = parse_task(VIA, &chain()).unwrap();
        let text = task.to_scenario();
        let again = parse_task(&text, &chain()).unwrap();
        assert_eq!(task, again);
    }

    fn parse_err(text: &str) -> TaskError {
        parse_task(text, &chain()).unwrap_err()
    }

    #[test]
    fn parse_errors_report_lines() {
        let e = parse_err("init q=0,0\nphase a {\n terminal {\n  PointAt link=hand target=0,0,0\n }\n}\n");
        assert!(matches!(e, TaskError::Parse { line: 4, ref message } if message.contains("unknown link")));

        let e = parse_err("init q=0,0\nphase a {\n terminal {\n  Teleport\n }\n}\n");
        assert!(matches!(e, TaskError::Parse { line: 4, ref message } if message.contains("unknown constraint")));

        let e = parse_err("init q=0,0\nphase a {\n terminal {\n  PointAt link=j2 target=0,0\n }\n}\n");
        assert!(matches!(e, TaskError::Parse { line: 4, .. }));

        let e = parse_err("init q=0,0\nphase a {\n terminal { PointAt link=j2 target=1,1,0 }\n path {\n  VelocityZero\n }\n}\n");
        assert!(matches!(e, TaskError::Parse { line: 5, .. }));

        let e = parse_err("init q=0,0\nphase a {\n terminal { LineTrack link=j2 a=0,0,0 b=1,0,0 }\n}\n");
        assert!(matches!(e, TaskError::Parse { line: 3, .. }));

        let e = parse_err("init q=0,0,0\nphase a { terminal { VelocityZero } }\n");
        assert!(matches!(e, TaskError::Parse { line: 1, .. }));

        let e = parse_err("init q=0,0\nphase a { terminal { VelocityZero } \n");
        assert!(matches!(e, TaskError::Parse { .. }));

        let e = parse_err("init q=0,0\nphase a { path { BoxRegion link=j2 lower=0,0,0 upper=1,1,1 } }\n");
        assert!(matches!(e, TaskError::Invalid(ref m) if m.contains("no terminal")));

        let e = parse_err("init q=9,0\nphase a { terminal { VelocityZero } }\n");
        assert!(matches!(e, TaskError::Invalid(ref m) if m.contains("outside limits")));
    }

    #[test]
    fn row_counts_are_a_function_of_variant_and_dof() {
        let chain = chain();
        let specs = [
            ConstraintSpec::PointAt {
                link: "j2".into(),
                target: [1.0, 0.0, 0.0],
                tol: 0.0,
            },
            ConstraintSpec::VelocityZero { tol: 0.0 },
            ConstraintSpec::JointConfig {
                q_target: vec![0.0, 0.0],
                tol: 0.1,
            },
            ConstraintSpec::LineTrack {
                link: "j2".into(),
                a: [0.0; 3],
                b: [1.0, 0.0, 0.0],
                tol: 0.01,
            },
            ConstraintSpec::BoxRegion {
                link: "j1".into(),
                lower: [-1.0; 3],
                upper: [1.0; 3],
            },
            ConstraintSpec::AxisAlign {
                link: "j2".into(),
                local_axis: [1.0, 0.0, 0.0],
                world_dir: [0.0, 1.0, 0.0],
                tol: 0.1,
            },
        ];
        let expected = [3, 2, 2, 2, 3, 1];
        for (spec, want) in specs.iter().zip(expected) {
            let mut g = ExpressionGraph::new();
            let q: Vec<_> = (0..2).map(|_| g.new_variable()).collect();
            let qd: Vec<_> = (0..2).map(|_| g.new_variable()).collect();
            let rows = lower_constraint(spec, &chain, &mut g, &q, &qd).unwrap();
            assert_eq!(rows.len(), want, "{}", spec.keyword());
            assert_eq!(spec.row_count(2), want);
        }
    }

    fn satisfied(g: &ExpressionGraph, rows: &[ConstraintRow], vals: &[f64]) -> (bool, f64) {
        let roots: Vec<_> = rows.iter().map(|r| r.expr).collect();
        let v = g.evaluate(&roots, vals).unwrap();
        let worst = rows
            .iter()
            .zip(&v)
            .map(|(r, &x)| r.violation(x))
            .fold(0.0, f64::max);
        (worst == 0.0, worst)
    }

    #[test]
    fn lowering_examples() {
        let chain = chain();
        let mut g = ExpressionGraph::new();
        let q: Vec<_> = (0..2).map(|_| g.new_variable()).collect();
        let qd: Vec<_> = (0..2).map(|_| g.new_variable()).collect();

        let point = ConstraintSpec::PointAt {
            link: "j2".into(),
            target: [2.0, 0.0, 0.0],
            tol: 0.0,
        };
        let rows = lower_constraint(&point, &chain, &mut g, &q, &qd).unwrap();
        assert!(rows.iter().all(ConstraintRow::is_equality));
        assert!(satisfied(&g, &rows, &[0.0, 0.0, 0.0, 0.0]).0);

        let still = ConstraintSpec::VelocityZero { tol: 0.0 };
        let rows = lower_constraint(&still, &chain, &mut g, &q, &qd).unwrap();
        let (ok, worst) = satisfied(&g, &rows, &[0.0, 0.0, 0.1, 0.0]);
        assert!(!ok);
        assert_eq!(worst, 0.1);
    }

    #[test]
    fn line_track_bounds_perpendicular_offset() {
        // one prismatic joint along y on top of one along x: the "tip" is (q1, q2, 0)
        let chain = parse_chain(
            "joint x prismatic axis=1,0,0 pos=-5,5 vel=1 acc=1\n\
             joint y prismatic axis=0,1,0 pos=-5,5 vel=1 acc=1",
        )
        .unwrap();
        let mut g = ExpressionGraph::new();
        let q: Vec<_> = (0..2).map(|_| g.new_variable()).collect();
        let qd: Vec<_> = (0..2).map(|_| g.new_variable()).collect();
        let line = ConstraintSpec::LineTrack {
            link: "y".into(),
            a: [0.0; 3],
            b: [1.0, 0.0, 0.0],
            tol: 0.01,
        };
        let rows = lower_constraint(&line, &chain, &mut g, &q, &qd).unwrap();
        assert_eq!(rows.len(), line.row_count(2));
        let half = 0.01 / 2f64.sqrt();
        assert!(rows.iter().all(|r| r.lower == -half && r.upper == half));
        let roots: Vec<_> = rows.iter().map(|r| r.expr).collect();
        let mut v = g.evaluate(&roots, &[0.5, 0.005, 0.0, 0.0]).unwrap();
        v.sort_by(f64::total_cmp);
        // the offsets are 0 along z and 0.005 along y, in some order and sign
        assert!(v[0].abs() < 1e-15 || (v[0] + 0.005).abs() < 1e-15, "{v:?}");
        assert!(v.iter().any(|x| (x.abs() - 0.005).abs() < 1e-15), "{v:?}");
        assert!(satisfied(&g, &rows, &[0.5, 0.005, 0.0, 0.0]).0);
        assert!(!satisfied(&g, &rows, &[-3.0, 0.008, 0.0, 0.0]).0);
    }

    #[test]
    fn normal_basis_is_orthonormal() {
        let s = 1.0 / 3f64.sqrt();
        for dir in [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [s, s, s], [0.6, 0.8, 0.0]] {
            let (e1, e2) = normal_basis(dir);
            let dot = |a: Vec3, b: Vec3| (0..3).map(|i| a[i] * b[i]).sum::<f64>();
            for (a, b) in [(e1, dir), (e2, dir), (e1, e2)] {
                assert!(dot(a, b).abs() < 1e-15);
            }
            assert!((norm(e1) - 1.0).abs() < 1e-15 && (norm(e2) - 1.0).abs() < 1e-15);
        }
    }
}
