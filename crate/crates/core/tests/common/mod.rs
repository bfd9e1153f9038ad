//! Oracles shared by the integration test targets.
#![allow(dead_code)]

use phaseplan::exprgraph::{ExprRef, ExpressionGraph};
use proptest::prelude::*;

/// One operation of a random expression, applied to earlier values by index.
#[derive(Clone, Debug)]
pub enum Step {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// a / (b^2 + 1)
    SafeDiv(usize, usize),
    Neg(usize),
    Sin(usize),
    Cos(usize),
    /// sqrt(a^2 + 0.5)
    SafeSqrt(usize),
    Square(usize),
    Scale(f64, usize),
}

#[derive(Clone, Debug)]
pub struct Recipe {
    pub vars: usize,
    pub consts: Vec<f64>,
    pub steps: Vec<Step>,
}

pub fn step_strategy(avail: usize) -> impl Strategy<Value = Step> {
    let i = 0..avail;
    prop_oneof![
        (i.clone(), 0..avail).prop_map(|(a, b)| Step::Add(a, b)),
        (i.clone(), 0..avail).prop_map(|(a, b)| Step::Sub(a, b)),
        (i.clone(), 0..avail).prop_map(|(a, b)| Step::Mul(a, b)),
        (i.clone(), 0..avail).prop_map(|(a, b)| Step::SafeDiv(a, b)),
        i.clone().prop_map(Step::Neg),
        i.clone().prop_map(Step::Sin),
        i.clone().prop_map(Step::Cos),
        i.clone().prop_map(Step::SafeSqrt),
        i.clone().prop_map(Step::Square),
        (-2.0..2.0f64, i).prop_map(|(c, a)| Step::Scale(c, a)),
    ]
}

pub fn recipe_strategy() -> impl Strategy<Value = (Recipe, Vec<f64>)> {
    (1usize..5, prop::collection::vec(-2.0..2.0f64, 0..3), 1usize..12)
        .prop_flat_map(|(vars, consts, len)| {
            let base = vars + consts.len();
            let steps: Vec<_> = (0..len).map(|k| step_strategy(base + k).boxed()).collect();
            (
                Just(vars),
                Just(consts),
                steps,
                prop::collection::vec(-1.5..1.5f64, vars),
            )
        })
        .prop_map(|(vars, consts, steps, point)| (Recipe { vars, consts, steps }, point))
}

/// Plain floating-point evaluation of a recipe: the value of every slot.
pub fn interpret(r: &Recipe, x: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = x.iter().copied().chain(r.consts.iter().copied()).collect();
    for s in &r.steps {
        let out = match *s {
            Step::Add(a, b) => v[a] + v[b],
            Step::Sub(a, b) => v[a] - v[b],
            Step::Mul(a, b) => v[a] * v[b],
            Step::SafeDiv(a, b) => v[a] / (v[b] * v[b] + 1.0),
            Step::Neg(a) => -v[a],
            Step::Sin(a) => v[a].sin(),
            Step::Cos(a) => v[a].cos(),
            Step::SafeSqrt(a) => (v[a] * v[a] + 0.5).sqrt(),
            Step::Square(a) => v[a] * v[a],
            Step::Scale(c, a) => c * v[a],
        };
        v.push(out);
    }
    v
}

/// Builds the recipe in a graph; returns the variables and the slot refs.
pub fn build(r: &Recipe) -> (ExpressionGraph, Vec<ExprRef>) {
    let mut g = ExpressionGraph::new();
    let mut slots: Vec<ExprRef> = (0..r.vars).map(|_| g.new_variable()).collect();
    for &c in &r.consts {
        slots.push(g.constant(c));
    }
    for s in &r.steps {
        let out = match *s {
            Step::Add(a, b) => g.add(slots[a], slots[b]),
            Step::Sub(a, b) => g.sub(slots[a], slots[b]),
            Step::Mul(a, b) => g.mul(slots[a], slots[b]),
            Step::SafeDiv(a, b) => {
                let sq = g.square(slots[b]);
                let one = g.constant(1.0);
                let den = g.add(sq, one);
                g.div(slots[a], den)
            }
            Step::Neg(a) => g.neg(slots[a]),
            Step::Sin(a) => g.sin(slots[a]),
            Step::Cos(a) => g.cos(slots[a]),
            Step::SafeSqrt(a) => {
                let sq = g.square(slots[a]);
                let c = g.constant(0.5);
                let s = g.add(sq, c);
                g.sqrt(s)
            }
            Step::Square(a) => g.square(slots[a]),
            Step::Scale(c, a) => g.scale(c, slots[a]),
        };
        slots.push(out);
    }
    (g, slots)
}

pub fn close(ad: f64, fd: f64) -> bool {
    if fd.abs() > 1e-3 {
        (ad - fd).abs() <= 1e-5 * fd.abs()
    } else {
        (ad - fd).abs() <= 1e-7
    }
}

/// Tip of a planar chain: sum of link vectors at cumulative angles.
pub fn planar_tip(lengths: &[f64], q: &[f64]) -> [f64; 2] {
    let mut theta = 0.0;
    let mut p = [0.0, 0.0];
    for (l, qi) in lengths.iter().zip(q) {
        theta += qi;
        p[0] += l * theta.cos();
        p[1] += l * theta.sin();
    }
    p
}
