//! Serial kinematic chains and symbolic forward kinematics.
//!
//! A chain file holds one `joint` record per line, base to tip:
//!
//! ```text
//! # name   kind      axis        origin       rpy       pos          vel   acc
//! joint j1 revolute  axis=0,0,1  origin=1,0,0 rpy=0,0,0 pos=-3.1,3.1 vel=2 acc=4
//! ```
//!
//! Each record names a frame. The frame of joint `j` is reached from the
//! frame of joint `j-1` (or the world frame for the first joint) by first
//! applying the joint motion about/along `axis`, then the fixed `origin`
//! translation and `rpy` rotation. The named frame therefore sits at the
//! distal end of the link the joint drives, and `origin` is that link's
//! offset. `origin` and `rpy` default to zero when omitted.
//!
//! A joint whose position limits coincide is rigid; use it for tool offsets.

use std::collections::HashSet;

use thiserror::Error;

use crate::exprgraph::{ExprRef, ExpressionGraph};

pub type Vec3 = [f64; 3];
type Mat3 = [[f64; 3]; 3];

const UNIT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointKind {
    Revolute,
    Prismatic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointDef {
    pub name: String,
    pub kind: JointKind,
    pub axis: Vec3,
    pub origin_translation: Vec3,
    pub origin_rotation: Vec3,
    pub position_limits: [f64; 2],
    pub velocity_limit: f64,
    pub acceleration_limit: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicChain {
    joints: Vec<JointDef>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: non-unit axis (norm {norm})")]
    NonUnitAxis { line: usize, norm: f64 },
    #[error("line {line}: duplicate joint name `{name}`")]
    DuplicateName { line: usize, name: String },
    #[error("line {line}: inverted position limits {lower} > {upper}")]
    InvertedLimits { line: usize, lower: f64, upper: f64 },
    #[error("line {line}: `{key}` must be positive")]
    NonPositiveLimit { line: usize, key: &'static str },
    #[error("chain has no joints")]
    Empty,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FkError {
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("axis {0:?} is not unit length")]
    NonUnitAxis(Vec3),
    #[error("expected {expected} joint variables, got {got}")]
    Dimension { expected: usize, got: usize },
}

impl KinematicChain {
    pub fn new(joints: Vec<JointDef>) -> Result<Self, ChainError> {
        if joints.is_empty() {
            return Err(ChainError::Empty);
        }
        let mut seen = HashSet::new();
        for (i, j) in joints.iter().enumerate() {
            validate_joint(j, i + 1)?;
            if !seen.insert(j.name.as_str()) {
                return Err(ChainError::DuplicateName {
                    line: i + 1,
                    name: j.name.clone(),
                });
            }
        }
        Ok(Self { joints })
    }

    /// Number of configuration variables.
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[JointDef] {
        &self.joints
    }

    /// Frame identifiers, one per joint.
    pub fn link_names(&self) -> impl Iterator<Item = &str> {
        self.joints.iter().map(|j| j.name.as_str())
    }

    pub fn link_index(&self, link: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == link)
    }

    pub fn position_lower(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.position_limits[0]).collect()
    }

    pub fn position_upper(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.position_limits[1]).collect()
    }

    pub fn velocity_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.velocity_limit).collect()
    }

    pub fn acceleration_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.acceleration_limit).collect()
    }

    fn frame(
        &self,
        link: &str,
        graph: &mut ExpressionGraph,
        q_vars: &[ExprRef],
    ) -> Result<Frame, FkError> {
        if q_vars.len() != self.dof() {
            return Err(FkError::Dimension {
                expected: self.dof(),
                got: q_vars.len(),
            });
        }
        let last = self
            .link_index(link)
            .ok_or_else(|| FkError::UnknownLink(link.to_string()))?;
        let mut frame = Frame::identity();
        for (joint, &q) in self.joints[..=last].iter().zip(q_vars) {
            frame = frame.through_joint(joint, q, graph);
        }
        Ok(frame)
    }

    /// World position of `link`'s frame origin.
    pub fn fk_position(
        &self,
        link: &str,
        graph: &mut ExpressionGraph,
        q_vars: &[ExprRef],
    ) -> Result<[ExprRef; 3], FkError> {
        let frame = self.frame(link, graph, q_vars)?;
        Ok(frame.p.map(|s| s.into_expr(graph)))
    }

    /// World direction of the `local_axis` of `link`'s frame.
    pub fn fk_axis(
        &self,
        link: &str,
        local_axis: Vec3,
        graph: &mut ExpressionGraph,
        q_vars: &[ExprRef],
    ) -> Result<[ExprRef; 3], FkError> {
        if (norm(local_axis) - 1.0).abs() > UNIT_TOL {
            return Err(FkError::NonUnitAxis(local_axis));
        }
        let frame = self.frame(link, graph, q_vars)?;
        let dir: [Sym; 3] = std::array::from_fn(|r| {
            let terms: Vec<Sym> = (0..3)
                .map(|c| frame.r[r][c].mul(Sym::Num(local_axis[c]), graph))
                .collect();
            Sym::sum(&terms, graph)
        });
        Ok(dir.map(|s| s.into_expr(graph)))
    }
}

fn validate_joint(j: &JointDef, line: usize) -> Result<(), ChainError> {
    let n = norm(j.axis);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(ChainError::NonUnitAxis { line, norm: n });
    }
    let [lower, upper] = j.position_limits;
    if lower > upper {
        return Err(ChainError::InvertedLimits { line, lower, upper });
    }
    if j.velocity_limit <= 0.0 {
        return Err(ChainError::NonPositiveLimit { line, key: "vel" });
    }
    if j.acceleration_limit <= 0.0 {
        return Err(ChainError::NonPositiveLimit { line, key: "acc" });
    }
    Ok(())
}

pub(crate) fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Parses a chain file.
pub fn parse_chain(text: &str) -> Result<KinematicChain, ChainError> {
    let mut joints = Vec::new();
    let mut names = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let joint = parse_joint(content, line)?;
        validate_joint(&joint, line)?;
        if !names.insert(joint.name.clone()) {
            return Err(ChainError::DuplicateName {
                line,
                name: joint.name,
            });
        }
        joints.push(joint);
    }
    if joints.is_empty() {
        return Err(ChainError::Empty);
    }
    Ok(KinematicChain { joints })
}

fn parse_joint(content: &str, line: usize) -> Result<JointDef, ChainError> {
    let malformed = |message: String| ChainError::Malformed { line, message };
    let mut tokens = content.split_whitespace();
    match tokens.next() {
        Some("joint") => {}
        Some(other) => return Err(malformed(format!("expected `joint`, found `{other}`"))),
        None => unreachable!("blank lines are skipped"),
    }
    let name = tokens
        .next()
        .ok_or_else(|| malformed("missing joint name".into()))?
        .to_string();
    if name.contains('=') {
        return Err(malformed(format!("invalid joint name `{name}`")));
    }
    let kind = match tokens.next() {
        Some("revolute") => JointKind::Revolute,
        Some("prismatic") => JointKind::Prismatic,
        Some(other) => return Err(malformed(format!("unknown joint kind `{other}`"))),
        None => return Err(malformed("missing joint kind".into())),
    };

    let mut axis = None;
    let mut origin = None;
    let mut rpy = None;
    let mut pos = None;
    let mut vel = None;
    let mut acc = None;
    for token in tokens {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| malformed(format!("expected key=value, found `{token}`")))?;
        let slot_err = |e: String| malformed(format!("`{key}`: {e}"));
        match key {
            "axis" => axis = Some(parse_vec::<3>(value).map_err(slot_err)?),
            "origin" => origin = Some(parse_vec::<3>(value).map_err(slot_err)?),
            "rpy" => rpy = Some(parse_vec::<3>(value).map_err(slot_err)?),
            "pos" => pos = Some(parse_vec::<2>(value).map_err(slot_err)?),
            "vel" => vel = Some(parse_vec::<1>(value).map_err(slot_err)?[0]),
            "acc" => acc = Some(parse_vec::<1>(value).map_err(slot_err)?[0]),
            other => return Err(malformed(format!("unknown key `{other}`"))),
        }
    }
    let require = |what: &str| malformed(format!("missing `{what}`"));
    Ok(JointDef {
        name,
        kind,
        axis: axis.ok_or_else(|| require("axis"))?,
        origin_translation: origin.unwrap_or([0.0; 3]),
        origin_rotation: rpy.unwrap_or([0.0; 3]),
        position_limits: pos.ok_or_else(|| require("pos"))?,
        velocity_limit: vel.ok_or_else(|| require("vel"))?,
        acceleration_limit: acc.ok_or_else(|| require("acc"))?,
    })
}

/// Parses exactly `N` comma-separated finite decimals.
pub(crate) fn parse_vec<const N: usize>(text: &str) -> Result<[f64; N], String> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != N {
        return Err(format!("expected {N} component(s), got {}", parts.len()));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_number(p)?;
    }
    Ok(out)
}

pub(crate) fn parse_number(text: &str) -> Result<f64, String> {
    let v: f64 = text
        .trim()
        .parse()
        .map_err(|_| format!("invalid number `{text}`"))?;
    if !v.is_finite() {
        return Err(format!("non-finite number `{text}`"));
    }
    Ok(v)
}

/// Rotation matrix for URDF-style roll-pitch-yaw, `Rz(yaw) Ry(pitch) Rx(roll)`.
pub fn rpy_matrix([roll, pitch, yaw]: Vec3) -> [[f64; 3]; 3] {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ]
}

/// Scalar that is either a literal or a graph node. Arithmetic on literals
/// folds, so constant link offsets don't bloat the graph.
#[derive(Clone, Copy, Debug)]
enum Sym {
    Num(f64),
    Expr(ExprRef),
}

impl Sym {
    fn into_expr(self, g: &mut ExpressionGraph) -> ExprRef {
        match self {
            Sym::Num(v) => g.constant(v),
            Sym::Expr(e) => e,
        }
    }

    fn add(self, other: Sym, g: &mut ExpressionGraph) -> Sym {
        match (self, other) {
            (Sym::Num(a), Sym::Num(b)) => Sym::Num(a + b),
            (Sym::Num(z), e) | (e, Sym::Num(z)) if z == 0.0 => e,
            (a, b) => {
                let (a, b) = (a.into_expr(g), b.into_expr(g));
                Sym::Expr(g.add(a, b))
            }
        }
    }

    fn mul(self, other: Sym, g: &mut ExpressionGraph) -> Sym {
        match (self, other) {
            (Sym::Num(a), Sym::Num(b)) => Sym::Num(a * b),
            (Sym::Num(z), _) | (_, Sym::Num(z)) if z == 0.0 => Sym::Num(0.0),
            (Sym::Num(o), e) | (e, Sym::Num(o)) if o == 1.0 => e,
            (Sym::Num(m), e) | (e, Sym::Num(m)) if m == -1.0 => {
                let e = e.into_expr(g);
                Sym::Expr(g.neg(e))
            }
            (a, b) => {
                let (a, b) = (a.into_expr(g), b.into_expr(g));
                Sym::Expr(g.mul(a, b))
            }
        }
    }

    fn sum(terms: &[Sym], g: &mut ExpressionGraph) -> Sym {
        terms.iter().fold(Sym::Num(0.0), |acc, &t| acc.add(t, g))
    }
}

#[derive(Clone, Copy, Debug)]
struct Frame {
    r: [[Sym; 3]; 3],
    p: [Sym; 3],
}

impl Frame {
    fn identity() -> Self {
        Self {
            r: std::array::from_fn(|i| {
                std::array::from_fn(|j| Sym::Num(if i == j { 1.0 } else { 0.0 }))
            }),
            p: [Sym::Num(0.0); 3],
        }
    }

    fn rotate(&self, m: &[[Sym; 3]; 3], g: &mut ExpressionGraph) -> [[Sym; 3]; 3] {
        std::array::from_fn(|i| {
            std::array::from_fn(|j| {
                let terms: Vec<Sym> = (0..3).map(|k| self.r[i][k].mul(m[k][j], g)).collect();
                Sym::sum(&terms, g)
            })
        })
    }

    fn apply(&self, v: [Sym; 3], g: &mut ExpressionGraph) -> [Sym; 3] {
        std::array::from_fn(|i| {
            let terms: Vec<Sym> = (0..3).map(|k| self.r[i][k].mul(v[k], g)).collect();
            Sym::sum(&terms, g)
        })
    }

    fn through_joint(self, joint: &JointDef, q: ExprRef, g: &mut ExpressionGraph) -> Frame {
        let k = joint.axis;
        let mut out = self;
        match joint.kind {
            JointKind::Revolute => {
                // R = k k^T + cos(q) (I - k k^T) + sin(q) [k]x
                let c = Sym::Expr(g.cos(q));
                let s = Sym::Expr(g.sin(q));
                let cross: Mat3 = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
                let motion: [[Sym; 3]; 3] = std::array::from_fn(|i| {
                    std::array::from_fn(|j| {
                        let kk = k[i] * k[j];
                        let id = if i == j { 1.0 } else { 0.0 };
                        let cos_part = c.mul(Sym::Num(id - kk), g);
                        let sin_part = s.mul(Sym::Num(cross[i][j]), g);
                        Sym::sum(&[Sym::Num(kk), cos_part, sin_part], g)
                    })
                });
                out.r = self.rotate(&motion, g);
            }
            JointKind::Prismatic => {
                let qs = Sym::Expr(q);
                let along = k.map(|a| qs.mul(Sym::Num(a), g));
                let shift = self.apply(along, g);
                out.p = std::array::from_fn(|i| self.p[i].add(shift[i], g));
            }
        }
        let offset = out.apply(joint.origin_translation.map(Sym::Num), g);
        out.p = std::array::from_fn(|i| out.p[i].add(offset[i], g));
        if joint.origin_rotation != [0.0; 3] {
            let rot = rpy_matrix(joint.origin_rotation).map(|row| row.map(Sym::Num));
            out.r = out.rotate(&rot, g);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    const PLANAR2: &str = "\
# two-link planar arm
joint j1 revolute axis=0,0,1 origin=1,0,0 rpy=0,0,0 pos=-3.14,3.14 vel=2 acc=5
joint j2 revolute axis=0,0,1 origin=1,0,0 rpy=0,0,0 pos=-3.14,3.14 vel=2 acc=5
";

    fn eval3(g: &ExpressionGraph, e: [ExprRef; 3], vals: &[f64]) -> Vec<f64> {
        g.evaluate(&e, vals).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn parses_planar_arm() {
        let chain = parse_chain(PLANAR2).unwrap();
        assert_eq!(chain.dof(), 2);
        assert_eq!(chain.link_names().collect::<Vec<_>>(), ["j1", "j2"]);
        assert_eq!(chain.joints()[1].origin_translation, [1.0, 0.0, 0.0]);
        assert_eq!(chain.velocity_limits(), vec![2.0, 2.0]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_chain("joint a revolute axis=0,0,2 pos=-1,1 vel=1 acc=1").unwrap_err();
        assert!(matches!(err, ChainError::NonUnitAxis { line: 1, .. }));
        assert!(err.to_string().contains("non-unit axis"));

        let dup = "joint a revolute axis=0,0,1 pos=-1,1 vel=1 acc=1\n\
                   joint a revolute axis=0,0,1 pos=-1,1 vel=1 acc=1";
        assert!(matches!(
            parse_chain(dup),
            Err(ChainError::DuplicateName { line: 2, .. })
        ));

        let inverted = "\n\njoint a prismatic axis=1,0,0 pos=1,-1 vel=1 acc=1";
        assert!(matches!(
            parse_chain(inverted),
            Err(ChainError::InvertedLimits { line: 3, .. })
        ));

        assert!(matches!(
            parse_chain("joint a revolute axis=0,0 pos=-1,1 vel=1 acc=1"),
            Err(ChainError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            parse_chain("joint a revolute axis=0,0,1 pos=-1,1 vel=0 acc=1"),
            Err(ChainError::NonPositiveLimit { key: "vel", .. })
        ));
        assert!(matches!(
            parse_chain("joint a twisty axis=0,0,1 pos=-1,1 vel=1 acc=1"),
            Err(ChainError::Malformed { .. })
        ));
        assert_eq!(parse_chain("# nothing\n"), Err(ChainError::Empty));
    }

    #[test]
    fn rigid_joint_is_allowed() {
        let chain = parse_chain("joint tool revolute axis=0,0,1 origin=0.1,0,0 pos=0,0 vel=1 acc=1")
            .unwrap();
        assert_eq!(chain.joints()[0].position_limits, [0.0, 0.0]);
    }

    #[test]
    fn planar_tip_positions() {
        let chain = parse_chain(PLANAR2).unwrap();
        let mut g = ExpressionGraph::new();
        let q: Vec<_> = (0..2).map(|_| g.new_variable()).collect();
        let tip = chain.fk_position("j2", &mut g, &q).unwrap();
        assert_close(&eval3(&g, tip, &[0.0, 0.0]), &[2.0, 0.0, 0.0]);
        assert_close(&eval3(&g, tip, &[FRAC_PI_2, 0.0]), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn prismatic_position_and_axis() {
        let chain = parse_chain("joint slide prismatic axis=1,0,0 pos=-2,2 vel=1 acc=1").unwrap();
        let mut g = ExpressionGraph::new();
        let q = vec![g.new_variable()];
        let p = chain.fk_position("slide", &mut g, &q).unwrap();
        assert_close(&eval3(&g, p, &[0.7]), &[0.7, 0.0, 0.0]);
        let z = chain.fk_axis("slide", [0.0, 0.0, 1.0], &mut g, &q).unwrap();
        for qv in [-1.3, 0.0, 0.4] {
            assert_close(&eval3(&g, z, &[qv]), &[0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn revolute_axis_rotates() {
        let chain = parse_chain("joint r revolute axis=0,0,1 pos=-4,4 vel=1 acc=1").unwrap();
        let mut g = ExpressionGraph::new();
        let q = vec![g.new_variable()];
        let x = chain.fk_axis("r", [1.0, 0.0, 0.0], &mut g, &q).unwrap();
        assert_close(&eval3(&g, x, &[FRAC_PI_2]), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn fk_errors() {
        let chain = parse_chain(PLANAR2).unwrap();
        let mut g = ExpressionGraph::new();
        let q: Vec<_> = (0..2).map(|_| g.new_variable()).collect();
        assert_eq!(
            chain.fk_position("hand", &mut g, &q),
            Err(FkError::UnknownLink("hand".into()))
        );
        assert!(matches!(
            chain.fk_axis("j2", [0.0, 0.0, 2.0], &mut g, &q),
            Err(FkError::NonUnitAxis(_))
        ));
        assert!(matches!(
            chain.fk_position("j2", &mut g, &q[..1]),
            Err(FkError::Dimension { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn rpy_matrix_is_orthonormal() {
        let r = rpy_matrix([0.3, -1.1, 2.0]);
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((d - expected).abs() < 1e-14);
            }
        }
    }
}
