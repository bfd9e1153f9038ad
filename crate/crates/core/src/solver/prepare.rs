//! Presolve and sparse evaluation for the interior-point loop.
//!
//! Rows that are a bare decision variable are folded into that variable's
//! bounds; variables with equal bounds are then removed from the iteration.
//! The objective is split into its additive terms so each term can carry its
//! own Hessian block.

use crate::exprgraph::{EvalError, ExprRef, ExpressionGraph, Node, Tape, TapeWorkspace};
use crate::nlp::Nlp;

/// A presolved problem in the reduced ("free") variable space.
#[derive(Clone, Debug)]
pub(crate) struct Prepared<'a> {
    graph: &'a ExpressionGraph,
    tape: Tape,
    /// Full decision vector with fixed entries filled in.
    template: Vec<f64>,
    /// Full index of each free variable.
    pub free: Vec<usize>,
    pub x_lower: Vec<f64>,
    pub x_upper: Vec<f64>,
    /// Objective terms: (element index, sign).
    pub terms: Vec<(usize, f64)>,
    pub objective_offset: f64,
    /// Equality rows: (element index, target).
    pub eq: Vec<(usize, f64)>,
    /// Inequality rows: (element index, lower, upper).
    pub ineq: Vec<(usize, f64, f64)>,
    /// Free columns each element depends on.
    pub cols: Vec<Vec<usize>>,
    /// Positions within the tape support that map to `cols`.
    picks: Vec<Vec<usize>>,
    /// `(element, position in cols[element])` for each free column.
    incidence: Vec<Vec<(usize, usize)>>,
    /// Groups of free columns that share no element.
    colors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum PresolveError {
    EmptyBounds { variable: usize, lower: f64, upper: f64 },
    /// A row that depends on no variable lies outside its bounds.
    ConstantRow { row: usize, value: f64 },
    Eval(EvalError),
}

/// Why a point could not be evaluated.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum PointError {
    Eval(EvalError),
    NonFinite,
}

impl From<EvalError> for PointError {
    fn from(e: EvalError) -> Self {
        PointError::Eval(e)
    }
}

/// Values and element gradients at one point.
#[derive(Clone, Debug, Default)]
pub(crate) struct Point {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_f: Vec<f64>,
    /// `c_eq - target`
    pub h_eq: Vec<f64>,
    pub c_in: Vec<f64>,
    /// Gradient of each element over `cols[e]`.
    pub grads: Vec<Vec<f64>>,
}

/// Splits an objective into signed additive terms, plus a constant.
fn split_terms(graph: &ExpressionGraph, root: ExprRef) -> (Vec<(ExprRef, f64)>, f64) {
    let mut terms = Vec::new();
    let mut offset = 0.0;
    let mut stack = vec![(root, 1.0)];
    while let Some((r, sign)) = stack.pop() {
        match *graph.node(r) {
            Node::Add(a, b) => {
                stack.push((b, sign));
                stack.push((a, sign));
            }
            Node::Sub(a, b) => {
                stack.push((b, -sign));
                stack.push((a, sign));
            }
            Node::Neg(a) => stack.push((a, -sign)),
            Node::Const(c) => offset += sign * c,
            _ => terms.push((r, sign)),
        }
    }
    (terms, offset)
}

/// Greedy coloring: columns of one color never appear in the same element,
/// so they can be perturbed together.
fn color_columns(cols: &[Vec<usize>], incidence: &[Vec<(usize, usize)>]) -> Vec<Vec<usize>> {
    let mut color = vec![usize::MAX; incidence.len()];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut mark: Vec<usize> = Vec::new();
    for j in 0..incidence.len() {
        mark.clear();
        for &(e, _) in &incidence[j] {
            for &c in &cols[e] {
                if color[c] != usize::MAX {
                    mark.push(color[c]);
                }
            }
        }
        mark.sort_unstable();
        mark.dedup();
        let k = (0..).find(|k| mark.binary_search(k).is_err()).unwrap();
        if k == groups.len() {
            groups.push(Vec::new());
        }
        groups[k].push(j);
        color[j] = k;
    }
    groups
}

/// Relative step for central differences of gradients.
const FD_STEP: f64 = 6e-6;

impl<'a> Prepared<'a> {
    pub(crate) fn new(nlp: &'a Nlp, guess: &[f64]) -> Result<(Self, Vec<f64>), PresolveError> {
        let graph = &nlp.graph;
        let dim = nlp.dimension();
        let mut lo = nlp.var_lower.clone();
        let mut hi = nlp.var_upper.clone();

        let mut kept_rows = Vec::new();
        for (i, row) in nlp.rows.iter().enumerate() {
            if let Node::Const(value) = *graph.node(row.expr) {
                if row.violation(value) > 0.0 {
                    return Err(PresolveError::ConstantRow { row: i, value });
                }
            } else if let Node::Var(v) = *graph.node(row.expr) {
                lo[v] = lo[v].max(row.lower);
                hi[v] = hi[v].min(row.upper);
            } else if row.lower.is_finite() || row.upper.is_finite() {
                kept_rows.push((*row, i));
            }
        }
        if let Some(v) = (0..dim).find(|&v| lo[v] > hi[v]) {
            return Err(PresolveError::EmptyBounds {
                variable: v,
                lower: lo[v],
                upper: hi[v],
            });
        }

        let template: Vec<f64> = (0..dim)
            .map(|v| {
                let g = guess.get(v).copied().unwrap_or(0.0);
                let g = if g.is_finite() { g } else { 0.0 };
                g.clamp(lo[v], hi[v])
            })
            .collect();
        let free: Vec<usize> = (0..dim).filter(|&v| lo[v] < hi[v]).collect();
        let mut col_of = vec![usize::MAX; dim];
        for (c, &v) in free.iter().enumerate() {
            col_of[v] = c;
        }

        let (term_roots, objective_offset) = split_terms(graph, nlp.objective);
        let mut roots: Vec<ExprRef> = term_roots.iter().map(|(r, _)| *r).collect();
        let terms = term_roots
            .iter()
            .enumerate()
            .map(|(e, (_, s))| (e, *s))
            .collect();
        let mut eq = Vec::new();
        let mut ineq = Vec::new();
        for (row, _) in &kept_rows {
            let e = roots.len();
            roots.push(row.expr);
            if row.is_equality() {
                eq.push((e, row.lower));
            } else {
                ineq.push((e, row.lower, row.upper));
            }
        }
        let tape = Tape::new(graph, &roots).map_err(PresolveError::Eval)?;
        let mut cols = Vec::with_capacity(roots.len());
        let mut picks = Vec::with_capacity(roots.len());
        for e in 0..roots.len() {
            let (mut c, mut p) = (Vec::new(), Vec::new());
            for (pos, &v) in tape.support(e).iter().enumerate() {
                if col_of[v] != usize::MAX {
                    c.push(col_of[v]);
                    p.push(pos);
                }
            }
            cols.push(c);
            picks.push(p);
        }
        // rows that only involve fixed variables are checked once and dropped
        if eq.iter().map(|r| r.0).chain(ineq.iter().map(|r| r.0)).any(|e| cols[e].is_empty()) {
            let mut ws = TapeWorkspace::default();
            let mut out = vec![0.0; roots.len()];
            tape.evaluate(graph, &template, &mut ws, &mut out)
                .map_err(PresolveError::Eval)?;
            let row_of = |e: usize| kept_rows[e - term_roots.len()].1;
            for &(e, target) in &eq {
                if cols[e].is_empty() && out[e] != target {
                    return Err(PresolveError::ConstantRow { row: row_of(e), value: out[e] });
                }
            }
            for &(e, lo, hi) in &ineq {
                if cols[e].is_empty() && !(lo <= out[e] && out[e] <= hi) {
                    return Err(PresolveError::ConstantRow { row: row_of(e), value: out[e] });
                }
            }
            eq.retain(|r| !cols[r.0].is_empty());
            ineq.retain(|r| !cols[r.0].is_empty());
        }
        let mut incidence = vec![Vec::new(); free.len()];
        for (e, c) in cols.iter().enumerate() {
            for (a, &j) in c.iter().enumerate() {
                incidence[j].push((e, a));
            }
        }
        let colors = color_columns(&cols, &incidence);
        let x0 = free.iter().map(|&v| template[v]).collect();
        let x_lower = free.iter().map(|&v| lo[v]).collect();
        let x_upper = free.iter().map(|&v| hi[v]).collect();
        Ok((
            Self {
                graph,
                tape,
                template,
                free,
                x_lower,
                x_upper,
                terms,
                objective_offset,
                eq,
                ineq,
                cols,
                picks,
                incidence,
                colors,
            },
            x0,
        ))
    }

    pub(crate) fn nx(&self) -> usize {
        self.free.len()
    }

    pub(crate) fn element_count(&self) -> usize {
        self.cols.len()
    }

    /// Full decision vector for free values `x`.
    pub(crate) fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.template.clone();
        for (&v, &xv) in self.free.iter().zip(x) {
            z[v] = xv;
        }
        z
    }

    fn check_finite(values: &[f64]) -> Result<(), PointError> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(PointError::NonFinite)
        }
    }

    /// Objective and constraint values only.
    pub(crate) fn values(
        &self,
        x: &[f64],
        ws: &mut TapeWorkspace,
    ) -> Result<(f64, Vec<f64>, Vec<f64>), PointError> {
        let z = self.expand(x);
        let mut out = vec![0.0; self.element_count()];
        self.tape.evaluate(self.graph, &z, ws, &mut out)?;
        Self::check_finite(&out)?;
        Ok(self.split_values(&out))
    }

    fn split_values(&self, out: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let f = self.objective_offset + self.terms.iter().map(|&(e, s)| s * out[e]).sum::<f64>();
        let h_eq = self.eq.iter().map(|&(e, t)| out[e] - t).collect();
        let c_in = self.ineq.iter().map(|&(e, _, _)| out[e]).collect();
        (f, h_eq, c_in)
    }

    /// Values and gradients at `x`.
    pub(crate) fn point(&self, x: &[f64], ws: &mut TapeWorkspace) -> Result<Point, PointError> {
        let k = self.element_count();
        let mut out = vec![0.0; k];
        let mut raw = vec![Vec::new(); k];
        let grads = self.element_gradients(x, ws, &mut out, &mut raw)?;
        Self::check_finite(&out)?;
        let (f, h_eq, c_in) = self.split_values(&out);
        let mut grad_f = vec![0.0; self.nx()];
        for &(e, s) in &self.terms {
            for (&c, &g) in self.cols[e].iter().zip(&grads[e]) {
                grad_f[c] += s * g;
            }
        }
        Ok(Point {
            x: x.to_vec(),
            f,
            grad_f,
            h_eq,
            c_in,
            grads,
        })
    }
}

impl Prepared<'_> {
    /// Element gradients at `x` in `cols` order.
    fn element_gradients(
        &self,
        x: &[f64],
        ws: &mut TapeWorkspace,
        out: &mut [f64],
        raw: &mut [Vec<f64>],
    ) -> Result<Vec<Vec<f64>>, PointError> {
        let z = self.expand(x);
        self.tape.gradients(self.graph, &z, ws, out, raw)?;
        let grads: Vec<Vec<f64>> = raw
            .iter()
            .zip(&self.picks)
            .map(|(g, p)| p.iter().map(|&i| g[i]).collect())
            .collect();
        for g in &grads {
            Self::check_finite(g)?;
        }
        Ok(grads)
    }

    /// Dense symmetric Hessian of every element over its `cols`, from central
    /// differences of element gradients. Linear elements come out exactly
    /// zero.
    pub(crate) fn element_hessians(
        &self,
        x: &[f64],
        ws: &mut TapeWorkspace,
    ) -> Result<Vec<Vec<f64>>, PointError> {
        let k = self.element_count();
        let mut hess: Vec<Vec<f64>> = self.cols.iter().map(|c| vec![0.0; c.len() * c.len()]).collect();
        let mut out = vec![0.0; k];
        let mut raw = vec![Vec::new(); k];
        let mut xp = x.to_vec();
        for group in &self.colors {
            let steps: Vec<f64> = group.iter().map(|&j| FD_STEP * x[j].abs().max(1.0)).collect();
            for (&j, &h) in group.iter().zip(&steps) {
                xp[j] = x[j] + h;
            }
            let plus = self.element_gradients(&xp, ws, &mut out, &mut raw)?;
            for (&j, &h) in group.iter().zip(&steps) {
                xp[j] = x[j] - h;
            }
            let minus = self.element_gradients(&xp, ws, &mut out, &mut raw)?;
            for (&j, &h) in group.iter().zip(&steps) {
                xp[j] = x[j];
                for &(e, a) in &self.incidence[j] {
                    let d = self.cols[e].len();
                    for b in 0..d {
                        hess[e][b * d + a] = (plus[e][b] - minus[e][b]) / (2.0 * h);
                    }
                }
            }
        }
        for (e, h) in hess.iter_mut().enumerate() {
            let d = self.cols[e].len();
            for a in 0..d {
                for b in 0..a {
                    let v = 0.5 * (h[a * d + b] + h[b * d + a]);
                    h[a * d + b] = v;
                    h[b * d + a] = v;
                }
            }
        }
        Ok(hess)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::ConstraintRow;

    #[test]
    fn splits_signed_terms() {
        let mut g = ExpressionGraph::new();
        let x = g.new_variable();
        let y = g.new_variable();
        let sx = g.square(x);
        let xy = g.mul(x, y);
        let three = g.constant(3.0);
        let a = g.sub(sx, xy);
        let b = g.add(a, three);
        let root = g.neg(b);
        let (terms, offset) = split_terms(&g, root);
        assert_eq!(terms, vec![(sx, -1.0), (xy, 1.0)]);
        assert_eq!(offset, -3.0);
    }

    #[test]
    fn bare_variable_rows_become_bounds() {
        let mut g = ExpressionGraph::new();
        let x = g.new_variable();
        let y = g.new_variable();
        let s = g.add(x, y);
        let nlp = Nlp {
            objective: s,
            rows: vec![
                ConstraintRow::equal(x, 0.25),
                ConstraintRow::new(s, 0.0, 1.0),
                ConstraintRow::at_most(y, 0.5),
            ],
            var_lower: vec![-1.0, -1.0],
            var_upper: vec![1.0, 1.0],
            graph: g,
        };
        let (p, x0) = Prepared::new(&nlp, &[0.9, 0.9]).unwrap();
        assert_eq!(p.free, vec![1]);
        assert_eq!(p.x_upper, vec![0.5]);
        assert_eq!(x0, vec![0.5]);
        assert_eq!(p.expand(&x0), vec![0.25, 0.5]);
        assert_eq!(p.ineq.len(), 1);
        assert!(p.eq.is_empty());
        // objective term `x + y` splits into two linear terms; only y is free
        let mut ws = TapeWorkspace::default();
        let pt = p.point(&[0.1], &mut ws).unwrap();
        assert_eq!(pt.grad_f, vec![1.0]);
        assert_eq!(pt.f, 0.35);
    }

    #[test]
    fn conflicting_folded_bounds_are_reported() {
        let mut g = ExpressionGraph::new();
        let x = g.new_variable();
        let nlp = Nlp {
            objective: x,
            rows: vec![ConstraintRow::at_least(x, 2.0)],
            var_lower: vec![0.0],
            var_upper: vec![1.0],
            graph: g,
        };
        assert!(matches!(
            Prepared::new(&nlp, &[0.0]),
            Err(PresolveError::EmptyBounds { variable: 0, .. })
        ));
    }

    #[test]
    fn element_hessians_match_closed_form() {
        // elements: x*y, sin(y) + z^2 as a row, and a linear row x + z
        let mut g = ExpressionGraph::new();
        let x = g.new_variable();
        let y = g.new_variable();
        let z = g.new_variable();
        let xy = g.mul(x, y);
        let sy = g.sin(y);
        let zz = g.square(z);
        let r1 = g.add(sy, zz);
        let r2 = g.add(x, z);
        let nlp = Nlp {
            objective: xy,
            rows: vec![ConstraintRow::equal(r1, 0.3), ConstraintRow::at_most(r2, 5.0)],
            var_lower: vec![-9.0; 3],
            var_upper: vec![9.0; 3],
            graph: g,
        };
        let (p, _) = Prepared::new(&nlp, &[0.0; 3]).unwrap();
        // x*y and x + z share x; sin(y) + z^2 shares y and z with them
        assert!(p.colors.len() >= 2);
        let pt = [0.7, -1.2, 2.5];
        let mut ws = TapeWorkspace::default();
        let h = p.element_hessians(&pt, &mut ws).unwrap();
        assert_eq!(p.cols[0], vec![0, 1]);
        let expect_xy = [0.0, 1.0, 1.0, 0.0];
        for (a, b) in h[0].iter().zip(expect_xy) {
            assert!((a - b).abs() < 1e-8, "{:?}", h[0]);
        }
        assert_eq!(p.cols[1], vec![1, 2]);
        let expect_r1 = [-(-1.2f64).sin(), 0.0, 0.0, 2.0];
        for (a, b) in h[1].iter().zip(expect_r1) {
            assert!((a - b).abs() < 1e-7, "{:?}", h[1]);
        }
        assert!(h[2].iter().all(|&v| v == 0.0));
    }
}
