//! Primal-dual interior-point iteration on a presolved problem.
//!
//! Inequality rows `lo <= c(x) <= hi` become `c(x) - s = 0` with bounded
//! slacks. Bounds on `x` and `s` are handled by a log barrier. Steps are
//! globalized by a backtracking line search, either with a filter on the pair
//! (constraint norm, barrier objective) or on the exact-penalty merit
//! `f - mu * sum(ln gaps) + nu * ||constraints||_2`. The filter falls back to
//! the merit when it finds no acceptable point.

use std::time::Instant;


use super::hessian::PartitionedBfgs;
use super::kkt::{FactorError, KktMatrix, Rhs, SparseRow, Step, SymMatrix};
use super::prepare::{Point, PointError, Prepared};
use super::{HessianApproximation, IterationRecord, LineSearch, SolveStatus, SolverOptions};
use crate::exprgraph::TapeWorkspace;

const KAPPA_PUSH: f64 = 1e-2;
const KAPPA_EPS: f64 = 10.0;
const KAPPA_SIGMA: f64 = 1e10;
const S_MAX: f64 = 100.0;
const ETA: f64 = 1e-4;
const RHO: f64 = 0.1;
const MU_MIN: f64 = 1e-11;
const MAX_BACKTRACK: usize = 60;
const MAX_RETRIES: usize = 12;
const STALL_LIMIT: usize = 15;
const GAMMA_THETA: f64 = 1e-5;
const GAMMA_PHI: f64 = 1e-5;
const S_THETA: f64 = 1.1;
const S_PHI: f64 = 2.3;

/// Pairs (constraint norm, barrier objective) that trial points must improve on.
struct Filter {
    entries: Vec<(f64, f64)>,
    theta_max: f64,
    theta_min: f64,
}

impl Filter {
    fn new(theta_init: f64) -> Self {
        Self {
            entries: Vec::new(),
            theta_max: 1e4 * theta_init.max(1.0),
            theta_min: 1e-4 * theta_init.max(1.0),
        }
    }

    fn blocks(&self, theta: f64, phi: f64) -> bool {
        theta > self.theta_max || self.entries.iter().any(|&(t, p)| theta >= t && phi >= p)
    }

    fn add(&mut self, theta: f64, phi: f64) {
        self.entries.retain(|&(t, p)| !(t >= theta && p >= phi));
        self.entries.push((theta, phi));
    }

    /// `Some(f_type)` when the trial is accepted. An f-type step only had to
    /// decrease the barrier objective and leaves the filter unchanged.
    fn test(&self, theta0: f64, phi0: f64, d_phi: f64, alpha: f64, theta: f64, phi: f64) -> Option<bool> {
        if !(theta.is_finite() && phi.is_finite()) || self.blocks(theta, phi) {
            return None;
        }
        let slack = 10.0 * f64::EPSILON * phi0.abs();
        let switching = d_phi < 0.0 && alpha * (-d_phi).powf(S_PHI) > theta0.powf(S_THETA);
        if theta0 <= self.theta_min && switching {
            (phi <= phi0 + ETA * alpha * d_phi + slack).then_some(true)
        } else {
            (theta <= (1.0 - GAMMA_THETA) * theta0 || phi <= phi0 - GAMMA_PHI * theta0 + slack)
                .then_some(false)
        }
    }

    /// Step length below which the filter search gives up.
    fn alpha_min(&self, theta0: f64, d_phi: f64) -> f64 {
        let a = if d_phi < 0.0 {
            let m = GAMMA_THETA.min(GAMMA_PHI * theta0 / -d_phi);
            if theta0 <= self.theta_min {
                m.min(theta0.powf(S_THETA) / (-d_phi).powf(S_PHI))
            } else {
                m
            }
        } else {
            GAMMA_THETA
        };
        0.05 * a
    }
}

/// An accepted trial point.
struct Candidate {
    alpha: f64,
    x: Vec<f64>,
    s: Vec<f64>,
    phi_b: f64,
    theta: f64,
    soc: Option<Direction>,
    f_type: bool,
}

/// Linear model of the step used by the acceptance tests.
struct Model {
    theta0: f64,
    phi_b0: f64,
    d_phi_b: f64,
    d_theta: f64,
}

pub(crate) struct Outcome {
    pub status: SolveStatus,
    /// Last accepted iterate, or the offending one after an evaluation failure.
    pub x: Vec<f64>,
    pub iterations: usize,
    pub trace: Vec<IterationRecord>,
}

/// Bounds of one block of barrier variables.
struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Bounds {
    fn len(&self) -> usize {
        self.lo.len()
    }

    fn count(&self) -> usize {
        self.lo.iter().filter(|v| v.is_finite()).count()
            + self.hi.iter().filter(|v| v.is_finite()).count()
    }

    /// Moves `v` strictly inside its bounds.
    fn push_interior(&self, v: &mut [f64]) {
        for i in 0..v.len() {
            let (l, u) = (self.lo[i], self.hi[i]);
            let mut pl = KAPPA_PUSH * l.abs().max(1.0);
            let mut pu = KAPPA_PUSH * u.abs().max(1.0);
            if l.is_finite() && u.is_finite() {
                pl = pl.min(KAPPA_PUSH * (u - l));
                pu = pu.min(KAPPA_PUSH * (u - l));
            }
            if l.is_finite() && v[i] < l + pl {
                v[i] = l + pl;
            }
            if u.is_finite() && v[i] > u - pu {
                v[i] = u - pu;
            }
        }
    }

    fn gap_lo(&self, v: &[f64], i: usize) -> f64 {
        v[i] - self.lo[i]
    }

    fn gap_hi(&self, v: &[f64], i: usize) -> f64 {
        self.hi[i] - v[i]
    }

    fn log_barrier(&self, v: &[f64]) -> f64 {
        let mut b = 0.0;
        for i in 0..v.len() {
            if self.lo[i].is_finite() {
                b -= self.gap_lo(v, i).ln();
            }
            if self.hi[i].is_finite() {
                b -= self.gap_hi(v, i).ln();
            }
        }
        b
    }

    /// Gradient of `-mu * sum(ln gaps)`.
    fn barrier_gradient(&self, v: &[f64], mu: f64) -> Vec<f64> {
        (0..v.len())
            .map(|i| {
                let mut g = 0.0;
                if self.lo[i].is_finite() {
                    g -= mu / self.gap_lo(v, i);
                }
                if self.hi[i].is_finite() {
                    g += mu / self.gap_hi(v, i);
                }
                g
            })
            .collect()
    }

    fn sigma(&self, v: &[f64], zl: &[f64], zu: &[f64]) -> Vec<f64> {
        (0..v.len())
            .map(|i| {
                let mut s = 0.0;
                if self.lo[i].is_finite() {
                    s += zl[i] / self.gap_lo(v, i);
                }
                if self.hi[i].is_finite() {
                    s += zu[i] / self.gap_hi(v, i);
                }
                s
            })
            .collect()
    }

    /// Largest `alpha <= 1` keeping `v + alpha dv` at least a fraction
    /// `1 - tau` of its current gap away from every bound.
    fn max_step(&self, v: &[f64], dv: &[f64], tau: f64) -> f64 {
        let mut alpha: f64 = 1.0;
        for i in 0..v.len() {
            if self.lo[i].is_finite() && dv[i] < 0.0 {
                alpha = alpha.min(-tau * self.gap_lo(v, i) / dv[i]);
            }
            if self.hi[i].is_finite() && dv[i] > 0.0 {
                alpha = alpha.min(tau * self.gap_hi(v, i) / dv[i]);
            }
        }
        alpha
    }

    /// Complementarity `max |gap * z - mu|` over finite bounds.
    fn complementarity(&self, v: &[f64], zl: &[f64], zu: &[f64], mu: f64) -> f64 {
        let mut e: f64 = 0.0;
        for i in 0..v.len() {
            if self.lo[i].is_finite() {
                e = e.max((self.gap_lo(v, i) * zl[i] - mu).abs());
            }
            if self.hi[i].is_finite() {
                e = e.max((self.gap_hi(v, i) * zu[i] - mu).abs());
            }
        }
        e
    }
}

/// Bound multipliers of one block.
struct Duals {
    zl: Vec<f64>,
    zu: Vec<f64>,
}

impl Duals {
    fn new(b: &Bounds) -> Self {
        let one = |v: &f64| if v.is_finite() { 1.0 } else { 0.0 };
        Self {
            zl: b.lo.iter().map(one).collect(),
            zu: b.hi.iter().map(one).collect(),
        }
    }

    fn l1(&self) -> f64 {
        self.zl.iter().chain(&self.zu).map(|v| v.abs()).sum()
    }

    /// Bound multiplier steps implied by a primal step `dv`.
    fn steps(&self, b: &Bounds, v: &[f64], dv: &[f64], mu: f64) -> (Vec<f64>, Vec<f64>) {
        let n = v.len();
        let mut dzl = vec![0.0; n];
        let mut dzu = vec![0.0; n];
        for i in 0..n {
            if b.lo[i].is_finite() {
                let g = b.gap_lo(v, i);
                dzl[i] = mu / g - self.zl[i] - self.zl[i] / g * dv[i];
            }
            if b.hi[i].is_finite() {
                let g = b.gap_hi(v, i);
                dzu[i] = mu / g - self.zu[i] + self.zu[i] / g * dv[i];
            }
        }
        (dzl, dzu)
    }

    fn max_step(&self, dzl: &[f64], dzu: &[f64], tau: f64) -> f64 {
        let mut alpha: f64 = 1.0;
        for (z, dz) in self.zl.iter().zip(dzl).chain(self.zu.iter().zip(dzu)) {
            if *dz < 0.0 && *z > 0.0 {
                alpha = alpha.min(-tau * z / dz);
            }
        }
        alpha
    }

    /// Takes the step, then keeps each multiplier within a wide band around
    /// its barrier value `mu / gap`.
    fn advance(&mut self, b: &Bounds, v: &[f64], dzl: &[f64], dzu: &[f64], alpha: f64, mu: f64) {
        for i in 0..v.len() {
            if b.lo[i].is_finite() {
                let target = mu / b.gap_lo(v, i);
                let z = self.zl[i] + alpha * dzl[i];
                self.zl[i] = z.clamp(target / KAPPA_SIGMA, target * KAPPA_SIGMA);
            }
            if b.hi[i].is_finite() {
                let target = mu / b.gap_hi(v, i);
                let z = self.zu[i] + alpha * dzu[i];
                self.zu[i] = z.clamp(target / KAPPA_SIGMA, target * KAPPA_SIGMA);
            }
        }
    }
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn norm2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().chain(b).map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn interval_distance(v: f64, lo: f64, hi: f64) -> f64 {
    if v < lo {
        v - lo
    } else if v > hi {
        v - hi
    } else {
        0.0
    }
}

struct Solver<'p, 'a> {
    prep: &'p Prepared<'a>,
    opts: &'p SolverOptions,
    ws: TapeWorkspace,
    xb: Bounds,
    sb: Bounds,
    /// Present when blocks are learned across iterations.
    bfgs: Option<PartitionedBfgs>,
}

/// Primal-dual state.
struct Iterate {
    pt: Point,
    s: Vec<f64>,
    y_eq: Vec<f64>,
    y_in: Vec<f64>,
    dx: Duals,
    ds: Duals,
}

/// Everything the line search needs about one candidate direction.
struct Direction {
    step: Step,
    dzx: (Vec<f64>, Vec<f64>),
    dzs: (Vec<f64>, Vec<f64>),
    alpha_primal: f64,
    alpha_dual: f64,
    delta_w: f64,
    delta_c: f64,
}

impl<'p, 'a> Solver<'p, 'a> {
    fn h_in(&self, c_in: &[f64], s: &[f64]) -> Vec<f64> {
        c_in.iter().zip(s).map(|(c, s)| c - s).collect()
    }

    fn merit(&self, f: f64, x: &[f64], s: &[f64], h_eq: &[f64], h_in: &[f64], mu: f64, nu: f64) -> f64 {
        f + mu * (self.xb.log_barrier(x) + self.sb.log_barrier(s)) + nu * norm2(h_eq, h_in)
    }

    fn violation(&self, h_eq: &[f64], c_in: &[f64]) -> f64 {
        let mut v = norm_inf(h_eq);
        for (k, &(_, lo, hi)) in self.prep.ineq.iter().enumerate() {
            v = v.max(interval_distance(c_in[k], lo, hi).abs());
        }
        v
    }

    fn eq_rows<'b>(&'b self, pt: &'b Point) -> Vec<SparseRow<'b>> {
        self.prep
            .eq
            .iter()
            .map(|&(e, _)| SparseRow {
                cols: &self.prep.cols[e],
                vals: &pt.grads[e],
            })
            .collect()
    }

    fn in_rows<'b>(&'b self, pt: &'b Point) -> Vec<SparseRow<'b>> {
        self.prep
            .ineq
            .iter()
            .map(|&(e, _, _)| SparseRow {
                cols: &self.prep.cols[e],
                vals: &pt.grads[e],
            })
            .collect()
    }

    /// `grad f + Je^T y_eq + Ji^T y_in`
    fn lagrangian_gradient(&self, it: &Iterate) -> Vec<f64> {
        let mut g = it.pt.grad_f.clone();
        for (k, &(e, _)) in self.prep.eq.iter().enumerate() {
            for (&c, &v) in self.prep.cols[e].iter().zip(&it.pt.grads[e]) {
                g[c] += it.y_eq[k] * v;
            }
        }
        for (k, &(e, _, _)) in self.prep.ineq.iter().enumerate() {
            for (&c, &v) in self.prep.cols[e].iter().zip(&it.pt.grads[e]) {
                g[c] += it.y_in[k] * v;
            }
        }
        g
    }

    fn multiplier_coefficients(&self, it: &Iterate) -> Vec<f64> {
        let mut coef = vec![0.0; self.prep.element_count()];
        for &(e, sign) in &self.prep.terms {
            coef[e] = sign;
        }
        for (k, &(e, _)) in self.prep.eq.iter().enumerate() {
            coef[e] = it.y_eq[k];
        }
        for (k, &(e, _, _)) in self.prep.ineq.iter().enumerate() {
            coef[e] = it.y_in[k];
        }
        coef
    }

    /// Scaled dual infeasibility and complementarity at barrier `mu`.
    fn errors(&self, it: &Iterate, mu: f64) -> (f64, f64) {
        let mut r_x = self.lagrangian_gradient(it);
        for i in 0..r_x.len() {
            r_x[i] += it.dx.zu[i] - it.dx.zl[i];
        }
        let r_s: Vec<f64> = (0..it.s.len())
            .map(|k| -it.y_in[k] - it.ds.zl[k] + it.ds.zu[k])
            .collect();
        let nb = self.xb.count() + self.sb.count();
        let zsum = it.dx.l1() + it.ds.l1();
        let ysum: f64 = it.y_eq.iter().chain(&it.y_in).map(|v| v.abs()).sum();
        let count = (nb + it.y_eq.len() + it.y_in.len()).max(1);
        let s_d = (S_MAX.max((ysum + zsum) / count as f64)) / S_MAX;
        let s_c = (S_MAX.max(zsum / nb.max(1) as f64)) / S_MAX;
        let dual = norm_inf(&r_x).max(norm_inf(&r_s)) / s_d;
        let compl = self
            .xb
            .complementarity(&it.pt.x, &it.dx.zl, &it.dx.zu, mu)
            .max(self.sb.complementarity(&it.s, &it.ds.zl, &it.ds.zu, mu))
            / s_c;
        (dual, compl)
    }

    fn hessian(&mut self, it: &Iterate) -> SymMatrix {
        let nx = self.prep.nx();
        let mut t = Vec::new();
        if let Some(bfgs) = &self.bfgs {
            bfgs.accumulate(&self.prep.cols, &mut t);
            return SymMatrix::from_triplets(nx, t);
        }
        let blocks = match self.prep.element_hessians(&it.pt.x, &mut self.ws) {
            Ok(b) => b,
            Err(e) => {
                log::debug!("finite-difference Hessian failed ({e:?}), using zero curvature");
                return SymMatrix::zeros(nx);
            }
        };
        let coef = self.multiplier_coefficients(it);
        for (e, block) in blocks.iter().enumerate() {
            let c = coef[e];
            let idx = &self.prep.cols[e];
            let d = idx.len();
            if c == 0.0 {
                continue;
            }
            for a in 0..d {
                for b in 0..=a {
                    let v = block[a * d + b];
                    if v != 0.0 {
                        t.push((idx[a], idx[b], c * v));
                    }
                }
            }
        }
        SymMatrix::from_triplets(nx, t)
    }

    /// Newton direction with inertia correction. `floor` is a lower bound on
    /// the primal regularization.
    fn direction(
        &self,
        it: &Iterate,
        w: &SymMatrix,
        mu: f64,
        floor: f64,
        last_dw: &mut f64,
    ) -> Option<Direction> {
        let x = &it.pt.x;
        let sigma_x = self.xb.sigma(x, &it.dx.zl, &it.dx.zu);
        let sigma_s = self.sb.sigma(&it.s, &it.ds.zl, &it.ds.zu);
        let j_eq = self.eq_rows(&it.pt);
        let j_in = self.in_rows(&it.pt);
        let mut r_x = self.lagrangian_gradient(it);
        for (r, b) in r_x.iter_mut().zip(self.xb.barrier_gradient(x, mu)) {
            *r += b;
        }
        let r_s: Vec<f64> = self
            .sb
            .barrier_gradient(&it.s, mu)
            .iter()
            .zip(&it.y_in)
            .map(|(b, y)| b - y)
            .collect();
        let h_in = self.h_in(&it.pt.c_in, &it.s);

        let mut delta_w = floor;
        let mut delta_c = 0.0;
        let mut first = true;
        let factor = loop {
            let kkt = KktMatrix {
                w,
                sigma_x: &sigma_x,
                sigma_s: &sigma_s,
                j_eq: &j_eq,
                j_in: &j_in,
                delta_w,
                delta_c,
            };
            match kkt.factor() {
                Ok(f) => break f,
                Err(FactorError::Singular) if delta_c == 0.0 => {
                    delta_c = 1e-8 * mu.powf(0.25);
                }
                Err(_) => {
                    let grow = if *last_dw == 0.0 { 100.0 } else { 8.0 };
                    let mut next = if first {
                        if *last_dw == 0.0 {
                            1e-4
                        } else {
                            (*last_dw / 3.0).max(1e-20)
                        }
                    } else {
                        delta_w * grow
                    };
                    if next <= delta_w {
                        next = delta_w * grow;
                    }
                    delta_w = next;
                    first = false;
                    if delta_w > 1e40 {
                        return None;
                    }
                }
            }
        };
        if delta_w > floor {
            *last_dw = delta_w;
        }
        let step = factor.solve(&Rhs {
            r_x: &r_x,
            r_s: &r_s,
            h_eq: &it.pt.h_eq,
            h_in: &h_in,
        });
        self.complete(it, step, mu, delta_w, delta_c)
    }

    /// Dual steps and step limits for a primal-dual step.
    fn complete(&self, it: &Iterate, step: Step, mu: f64, delta_w: f64, delta_c: f64) -> Option<Direction> {
        if step.dx.iter().chain(&step.ds).any(|v| !v.is_finite()) {
            return None;
        }
        let x = &it.pt.x;
        let tau = (1.0 - mu).max(0.99);
        let dzx = it.dx.steps(&self.xb, x, &step.dx, mu);
        let dzs = it.ds.steps(&self.sb, &it.s, &step.ds, mu);
        let alpha_primal = self
            .xb
            .max_step(x, &step.dx, tau)
            .min(self.sb.max_step(&it.s, &step.ds, tau));
        let alpha_dual = it
            .dx
            .max_step(&dzx.0, &dzx.1, tau)
            .min(it.ds.max_step(&dzs.0, &dzs.1, tau));
        Some(Direction {
            step,
            dzx,
            dzs,
            alpha_primal,
            alpha_dual,
            delta_w,
            delta_c,
        })
    }

    /// Second-order correction of `dir` after the trial point at `alpha`
    /// with residuals `h_eq_t`, `h_in_t` was rejected.
    fn corrected(
        &self,
        it: &Iterate,
        w: &SymMatrix,
        mu: f64,
        dir: &Direction,
        alpha: f64,
        h_eq_t: &[f64],
        h_in_t: &[f64],
    ) -> Option<Direction> {
        let x = &it.pt.x;
        let sigma_x = self.xb.sigma(x, &it.dx.zl, &it.dx.zu);
        let sigma_s = self.sb.sigma(&it.s, &it.ds.zl, &it.ds.zu);
        let j_eq = self.eq_rows(&it.pt);
        let j_in = self.in_rows(&it.pt);
        let factor = KktMatrix {
            w,
            sigma_x: &sigma_x,
            sigma_s: &sigma_s,
            j_eq: &j_eq,
            j_in: &j_in,
            delta_w: dir.delta_w,
            delta_c: dir.delta_c,
        }
        .factor()
        .ok()?;
        let mut r_x = self.lagrangian_gradient(it);
        for (r, b) in r_x.iter_mut().zip(self.xb.barrier_gradient(x, mu)) {
            *r += b;
        }
        let r_s: Vec<f64> = self
            .sb
            .barrier_gradient(&it.s, mu)
            .iter()
            .zip(&it.y_in)
            .map(|(b, y)| b - y)
            .collect();
        let h_in0 = self.h_in(&it.pt.c_in, &it.s);
        let h_eq: Vec<f64> = it.pt.h_eq.iter().zip(h_eq_t).map(|(a, b)| alpha * a + b).collect();
        let h_in: Vec<f64> = h_in0.iter().zip(h_in_t).map(|(a, b)| alpha * a + b).collect();
        let step = factor.solve(&Rhs {
            r_x: &r_x,
            r_s: &r_s,
            h_eq: &h_eq,
            h_in: &h_in,
        });
        self.complete(it, step, mu, dir.delta_w, dir.delta_c)
    }

    fn trial(&self, it: &Iterate, dir: &Direction, alpha: f64) -> (Vec<f64>, Vec<f64>) {
        let xt = it.pt.x.iter().zip(&dir.step.dx).map(|(x, d)| x + alpha * d).collect();
        let st = it.s.iter().zip(&dir.step.ds).map(|(s, d)| s + alpha * d).collect();
        (xt, st)
    }

    /// Barrier objective, constraint norm and residuals at a trial point.
    fn measure(&mut self, x: &[f64], s: &[f64], mu: f64) -> Option<(f64, f64, Vec<f64>, Vec<f64>)> {
        let (f, h_eq, c_in) = self.prep.values(x, &mut self.ws).ok()?;
        let h_in = self.h_in(&c_in, s);
        let phi_b = self.merit(f, x, s, &h_eq, &h_in, mu, 0.0);
        Some((phi_b, norm2(&h_eq, &h_in), h_eq, h_in))
    }

    /// Backtracks from the largest feasible step; a second-order correction
    /// is tried when the first trial increases the constraint norm.
    fn backtrack(
        &mut self,
        it: &Iterate,
        w: &SymMatrix,
        mu: f64,
        dir: &Direction,
        theta0: f64,
        alpha_min: f64,
        accept: impl Fn(f64, f64, f64) -> Option<bool>,
    ) -> Option<Candidate> {
        let mut alpha = dir.alpha_primal;
        for trial in 0..MAX_BACKTRACK {
            if alpha < alpha_min {
                break;
            }
            let (xt, st) = self.trial(it, dir, alpha);
            if let Some((phi_b, theta, h_eq, h_in)) = self.measure(&xt, &st, mu) {
                if let Some(f_type) = accept(alpha, theta, phi_b) {
                    return Some(Candidate { alpha, x: xt, s: st, phi_b, theta, soc: None, f_type });
                }
                if trial == 0 && theta >= theta0 {
                    if let Some(soc) = self.corrected(it, w, mu, dir, alpha, &h_eq, &h_in) {
                        let a = soc.alpha_primal;
                        let (xs, ss) = self.trial(it, &soc, a);
                        if let Some((phi_b, theta, _, _)) = self.measure(&xs, &ss, mu) {
                            // judged against the step length of the uncorrected trial
                            if let Some(f_type) = accept(alpha, theta, phi_b) {
                                return Some(Candidate {
                                    alpha: a,
                                    x: xs,
                                    s: ss,
                                    phi_b,
                                    theta,
                                    soc: Some(soc),
                                    f_type,
                                });
                            }
                        }
                    }
                }
            }
            alpha *= 0.5;
        }
        None
    }

    fn merit_search(
        &mut self,
        it: &Iterate,
        w: &SymMatrix,
        mu: f64,
        dir: &Direction,
        model: &Model,
        nu: f64,
    ) -> Option<Candidate> {
        let d_phi = model.d_phi_b + nu * model.d_theta;
        if d_phi > 0.0 {
            return None;
        }
        let phi0 = model.phi_b0 + nu * model.theta0;
        let slack = 10.0 * f64::EPSILON * phi0.abs();
        self.backtrack(it, w, mu, dir, model.theta0, 0.0, |alpha, theta, phi_b| {
            let phi = phi_b + nu * theta;
            (phi <= phi0 && phi <= phi0 + ETA * alpha * d_phi + slack).then_some(false)
        })
    }

    fn filter_search(
        &mut self,
        it: &Iterate,
        w: &SymMatrix,
        mu: f64,
        dir: &Direction,
        model: &Model,
        filter: &Filter,
    ) -> Option<Candidate> {
        let alpha_min = filter.alpha_min(model.theta0, model.d_phi_b);
        self.backtrack(it, w, mu, dir, model.theta0, alpha_min, |alpha, theta, phi_b| {
            filter.test(model.theta0, model.phi_b0, model.d_phi_b, alpha, theta, phi_b)
        })
    }

    fn run(&mut self, x0: Vec<f64>, start: Instant) -> Outcome {
        let prep = self.prep;
        let mut trace = Vec::new();
        let mut x0 = x0;
        self.xb.push_interior(&mut x0);
        let pt = match prep.point(&x0, &mut self.ws) {
            Ok(pt) => pt,
            Err(_) => {
                return Outcome {
                    status: SolveStatus::NumericalFailure,
                    x: x0,
                    iterations: 0,
                    trace,
                }
            }
        };
        let mut s = pt.c_in.clone();
        self.sb.push_interior(&mut s);
        let mut it = Iterate {
            y_eq: vec![0.0; prep.eq.len()],
            y_in: vec![0.0; prep.ineq.len()],
            dx: Duals::new(&self.xb),
            ds: Duals::new(&self.sb),
            s,
            pt,
        };

        let mut mu = self.opts.mu_init;
        let mut nu: f64 = 1.0;
        let mut filter = Filter::new(norm2(&it.pt.h_eq, &self.h_in(&it.pt.c_in, &it.s)));
        let mut last_dw = 0.0;
        let mut stall = 0;
        let mut iter = 0;
        loop {
            let viol = self.violation(&it.pt.h_eq, &it.pt.c_in);
            let (dual, compl0) = self.errors(&it, 0.0);
            if dual <= self.opts.stationarity_tol
                && compl0 <= self.opts.stationarity_tol
                && viol <= self.opts.constraint_tol
            {
                return self.finish(SolveStatus::Optimal, it, iter, trace);
            }
            loop {
                let (d, c) = self.errors(&it, mu);
                if mu <= MU_MIN || d.max(c).max(viol) > KAPPA_EPS * mu {
                    break;
                }
                mu = MU_MIN.max((0.2 * mu).min(mu.powf(1.5)));
                filter.entries.clear();
            }
            if iter >= self.opts.max_iterations {
                return self.finish(SolveStatus::MaxIterations, it, iter, trace);
            }
            if let Some(limit) = self.opts.time_limit {
                if start.elapsed().as_secs_f64() > limit {
                    return self.finish(SolveStatus::MaxIterations, it, iter, trace);
                }
            }

            let w = self.hessian(&it);
            let h_in0 = self.h_in(&it.pt.c_in, &it.s);
            let theta0 = norm2(&it.pt.h_eq, &h_in0);
            let mut floor = 0.0;
            let mut accepted = None;
            for _ in 0..MAX_RETRIES {
                let Some(dir) = self.direction(&it, &w, mu, floor, &mut last_dw) else {
                    break;
                };
                // directional derivatives of the barrier objective and of the
                // constraint norm
                let gb_x = self.xb.barrier_gradient(&it.pt.x, mu);
                let gb_s = self.sb.barrier_gradient(&it.s, mu);
                let d_phi_b = dot(&it.pt.grad_f, &dir.step.dx)
                    + dot(&gb_x, &dir.step.dx)
                    + dot(&gb_s, &dir.step.ds);
                let wdx = w.mul_vec(&dir.step.dx);
                let sigma_x = self.xb.sigma(&it.pt.x, &it.dx.zl, &it.dx.zu);
                let sigma_s = self.sb.sigma(&it.s, &it.ds.zl, &it.ds.zu);
                let quad = dot(&wdx, &dir.step.dx)
                    + (0..prep.nx())
                        .map(|i| sigma_x[i] * dir.step.dx[i].powi(2))
                        .sum::<f64>()
                    + (0..it.s.len())
                        .map(|i| sigma_s[i] * dir.step.ds[i].powi(2))
                        .sum::<f64>();
                let d_theta = if theta0 > 0.0 {
                    let j_eq = self.eq_rows(&it.pt);
                    let j_in = self.in_rows(&it.pt);
                    let mut acc = 0.0;
                    for (k, row) in j_eq.iter().enumerate() {
                        let jd: f64 = row.cols.iter().zip(row.vals).map(|(&c, &v)| v * dir.step.dx[c]).sum();
                        acc += it.pt.h_eq[k] * jd;
                    }
                    for (k, row) in j_in.iter().enumerate() {
                        let jd: f64 = row.cols.iter().zip(row.vals).map(|(&c, &v)| v * dir.step.dx[c]).sum();
                        acc += h_in0[k] * (jd - dir.step.ds[k]);
                    }
                    acc / theta0
                } else {
                    0.0
                };
                if theta0 > 0.0 {
                    let nu_trial = (d_phi_b + 0.5 * quad.max(0.0)) / ((1.0 - RHO) * theta0);
                    if nu < nu_trial {
                        nu = nu_trial + 1.0;
                    }
                }
                let model = Model {
                    theta0,
                    phi_b0: self.merit(it.pt.f, &it.pt.x, &it.s, &it.pt.h_eq, &h_in0, mu, 0.0),
                    d_phi_b,
                    d_theta,
                };
                let mut found = None;
                if self.opts.line_search == LineSearch::Filter {
                    found = self.filter_search(&it, &w, mu, &dir, &model, &filter);
                    if let Some(c) = &found {
                        if !c.f_type {
                            filter.add(
                                (1.0 - GAMMA_THETA) * theta0,
                                model.phi_b0 - GAMMA_PHI * theta0,
                            );
                        }
                    }
                }
                if found.is_none() {
                    found = self.merit_search(&it, &w, mu, &dir, &model, nu);
                    if found.is_some() {
                        // the filter may now block the region the merit moved to
                        filter.entries.clear();
                    }
                }
                match found {
                    Some(mut c) => {
                        let phi0 = model.phi_b0 + nu * theta0;
                        let dir = c.soc.take().unwrap_or(dir);
                        accepted = Some((dir, c, phi0));
                        break;
                    }
                    None => {
                        floor = (floor * 10.0).max(1e-4).max(dir.delta_w * 10.0);
                    }
                }
            }

            let Some((dir, cand, phi0)) = accepted else {
                let status = if viol > self.opts.constraint_tol {
                    SolveStatus::Infeasible
                } else {
                    SolveStatus::NumericalFailure
                };
                return self.finish(status, it, iter, trace);
            };
            let phi = cand.phi_b + nu * cand.theta;
            let (alpha, xt, st) = (cand.alpha, cand.x, cand.s);

            let new_pt = match prep.point(&xt, &mut self.ws) {
                Ok(p) => p,
                Err(PointError::Eval(_)) | Err(PointError::NonFinite) => {
                    return Outcome {
                        status: SolveStatus::NumericalFailure,
                        x: xt,
                        iterations: iter + 1,
                        trace,
                    };
                }
            };
            let alpha_dual = dir.alpha_dual;
            for (y, d) in it.y_eq.iter_mut().zip(&dir.step.dy_eq) {
                *y += alpha * d;
            }
            for (y, d) in it.y_in.iter_mut().zip(&dir.step.dy_in) {
                *y += alpha * d;
            }
            let coef = self.multiplier_coefficients(&it);
            if let Some(bfgs) = &mut self.bfgs {
                for e in 0..prep.element_count() {
                    let cols = &prep.cols[e];
                    if cols.is_empty() || coef[e] == 0.0 {
                        continue;
                    }
                    let sv: Vec<f64> = cols.iter().map(|&c| xt[c] - it.pt.x[c]).collect();
                    let yv: Vec<f64> = new_pt.grads[e]
                        .iter()
                        .zip(&it.pt.grads[e])
                        .map(|(a, b)| coef[e] * (a - b))
                        .collect();
                    bfgs.update(e, &sv, &yv);
                }
            }
            let small_step = dir
                .step
                .dx
                .iter()
                .zip(&it.pt.x)
                .all(|(d, x)| (alpha * d).abs() <= 1e-12 * (1.0 + x.abs()));
            it.pt = new_pt;
            it.s = st;
            it.dx
                .advance(&self.xb, &it.pt.x, &dir.dzx.0, &dir.dzx.1, alpha_dual, mu);
            it.ds
                .advance(&self.sb, &it.s, &dir.dzs.0, &dir.dzs.1, alpha_dual, mu);
            iter += 1;
            let new_viol = self.violation(&it.pt.h_eq, &it.pt.c_in);
            trace.push(IterationRecord {
                iteration: iter,
                mu,
                penalty: nu,
                merit_before: phi0,
                merit_after: phi,
                alpha_primal: alpha,
                alpha_dual,
                objective: it.pt.f,
                max_violation: new_viol,
                regularization: dir.delta_w,
            });
            if self.opts.verbosity >= 2 {
                log::info!(
                    "iter {iter:4} f={:.8e} viol={new_viol:.2e} mu={mu:.1e} alpha={alpha:.2e} max={:.2e} step={:.2e} dual={alpha_dual:.2e} nu={nu:.1e} dw={:.1e}",
                    it.pt.f,
                    dir.alpha_primal,
                    dir.step.dx.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                    dir.delta_w
                );
            }
            stall = if small_step { stall + 1 } else { 0 };
            if stall >= STALL_LIMIT && mu <= MU_MIN {
                let status = if new_viol > self.opts.constraint_tol {
                    SolveStatus::Infeasible
                } else {
                    SolveStatus::NumericalFailure
                };
                return self.finish(status, it, iter, trace);
            }
            if nu > 1e20 && new_viol > self.opts.constraint_tol {
                return self.finish(SolveStatus::Infeasible, it, iter, trace);
            }
        }
    }

    fn finish(
        &self,
        status: SolveStatus,
        it: Iterate,
        iterations: usize,
        trace: Vec<IterationRecord>,
    ) -> Outcome {
        Outcome {
            status,
            x: it.pt.x,
            iterations,
            trace,
        }
    }
}

pub(crate) fn run(prep: &Prepared, x0: Vec<f64>, opts: &SolverOptions, start: Instant) -> Outcome {
    let xb = Bounds {
        lo: prep.x_lower.clone(),
        hi: prep.x_upper.clone(),
    };
    let sb = Bounds {
        lo: prep.ineq.iter().map(|r| r.1).collect(),
        hi: prep.ineq.iter().map(|r| r.2).collect(),
    };
    debug_assert_eq!(xb.len(), prep.nx());
    let bfgs = match opts.hessian {
        HessianApproximation::PartitionedBfgs => {
            Some(PartitionedBfgs::new(prep.cols.iter().map(|c| c.len())))
        }
        HessianApproximation::FiniteDifference => None,
    };
    let mut solver = Solver {
        prep,
        opts,
        ws: TapeWorkspace::default(),
        xb,
        sb,
        bfgs,
    };
    solver.run(x0, start)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_keeps_only_undominated_pairs() {
        let mut f = Filter::new(0.0);
        f.add(1.0, 5.0);
        f.add(0.5, 6.0);
        assert!(f.blocks(1.0, 5.0));
        assert!(f.blocks(0.7, 6.5));
        assert!(!f.blocks(0.7, 5.5));
        assert!(!f.blocks(2.0, 4.0));
        f.add(0.4, 4.0);
        assert_eq!(f.entries, vec![(0.4, 4.0)]);
        assert!(f.blocks(f.theta_max * 2.0, -1e9));
    }

    #[test]
    fn small_infeasibility_needs_armijo_decrease() {
        let f = Filter::new(1.0);
        // theta0 below theta_min and a descent direction: f-type
        let (theta0, phi0, d_phi) = (1e-6, 1.0, -1.0);
        assert_eq!(f.test(theta0, phi0, d_phi, 1.0, 1e-3, 0.5), Some(true));
        assert_eq!(f.test(theta0, phi0, d_phi, 1.0, 1e-7, 1.0), None);
        // large infeasibility: reducing either measure is enough
        let theta0 = 1.0;
        assert_eq!(f.test(theta0, phi0, d_phi, 1.0, 0.5, 2.0), Some(false));
        assert_eq!(f.test(theta0, phi0, d_phi, 1.0, 1.5, 0.5), Some(false));
        assert_eq!(f.test(theta0, phi0, d_phi, 1.0, 1.5, 2.0), None);
        assert_eq!(f.test(theta0, phi0, d_phi, 1.0, f64::NAN, 0.0), None);
    }
}

