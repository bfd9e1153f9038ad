//! Newton step of the barrier subproblem.
//!
//! The primal-dual system over `(dx, ds, dy_eq, dy_in)` is
//!
//! ```text
//! (W + Sx + dw) dx + Je^T dy_eq + Ji^T dy_in = -r_x
//!       (Ss + dw) ds            -      dy_in = -r_s
//!                Je dx - dc dy_eq             = -h_eq
//!                Ji dx - ds                   = -h_in
//! ```
//!
//! Slack steps and inequality multipliers are eliminated, leaving
//!
//! ```text
//! [ M   Je^T  ] [ dx    ]       M = W + Sx + dw + Ji^T (Ss + dw) Ji
//! [ Je  -dc I ] [ dy_eq ]
//! ```
//!
//! which is reordered by approximate minimum degree and factored as `L D L^T`
//! without pivoting. By Sylvester's law the signs of `D` give the inertia; the
//! step is only accepted when the matrix has exactly `nx` positive and `n_eq`
//! negative eigenvalues, otherwise the caller raises `dw` (or `dc`).

use faer::dyn_stack::{MemBuffer, MemStack, StackReq};
use faer::linalg::cholesky::ldlt::factor::LdltRegularization;
use faer::sparse::linalg::amd;
use faer::sparse::linalg::cholesky::simplicial::{self, SimplicialLdltRef, SymbolicSimplicialCholesky};
use faer::sparse::{SparseColMat, SymbolicSparseColMat};
use faer::{Conj, Mat, Par};

/// Symmetric sparse matrix kept as its lower triangle, entries sorted by
/// column then row, duplicates summed.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct SymMatrix {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SymMatrix {
    /// Entries may name either triangle; `(i, j)` and `(j, i)` denote the
    /// same element and are summed.
    pub(crate) fn from_triplets(n: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        for e in &mut t {
            if e.0 < e.1 {
                *e = (e.1, e.0, e.2);
            }
            debug_assert!(e.0 < n);
        }
        t.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(t.len());
        for (i, j, v) in t {
            match entries.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => entries.push((i, j, v)),
            }
        }
        Self { n, entries }
    }

    pub(crate) fn zeros(n: usize) -> Self {
        Self { n, entries: Vec::new() }
    }

    pub(crate) fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub(crate) fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for &(i, j, a) in &self.entries {
            out[i] += a * v[j];
            if i != j {
                out[j] += a * v[i];
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SparseRow<'a> {
    pub cols: &'a [usize],
    pub vals: &'a [f64],
}

impl SparseRow<'_> {
    fn dot(&self, v: &[f64]) -> f64 {
        self.cols.iter().zip(self.vals).map(|(&c, &a)| a * v[c]).sum()
    }

    fn axpy(&self, alpha: f64, out: &mut [f64]) {
        for (&c, &a) in self.cols.iter().zip(self.vals) {
            out[c] += alpha * a;
        }
    }
}

pub(crate) struct KktMatrix<'a> {
    /// Hessian approximation.
    pub w: &'a SymMatrix,
    pub sigma_x: &'a [f64],
    pub sigma_s: &'a [f64],
    pub j_eq: &'a [SparseRow<'a>],
    pub j_in: &'a [SparseRow<'a>],
    pub delta_w: f64,
    pub delta_c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum FactorError {
    /// Too few positive eigenvalues: the Hessian is not positive definite on
    /// the null space of the equality Jacobian.
    WrongInertia,
    /// Zero eigenvalues, typically from dependent equality rows.
    Singular,
}

pub(crate) struct Factorization<'a> {
    kkt: KktMatrix<'a>,
    symbolic: SymbolicSimplicialCholesky<usize>,
    l_values: Vec<f64>,
    /// `perm[new] = old`
    perm: Vec<usize>,
}

/// Smallest constraint regularization used in the factor. Without it an
/// ordering that eliminates a constraint row before its variables meets an
/// exact zero pivot; refinement removes the perturbation from the step.
const DELTA_C_FLOOR: f64 = 1e-10;

/// Counts (positive, negative, zero) pivots.
fn inertia(d: &[f64], delta_c: f64) -> (usize, usize, usize) {
    let scale = d
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    // pivots of a regularized constraint block are of order delta_c
    let mut tiny = 1e-13 * scale;
    if delta_c > 0.0 {
        tiny = tiny.min(1e-3 * delta_c);
    }
    let (mut pos, mut neg, mut zero) = (0, 0, 0);
    for &v in d {
        if !v.is_finite() || v.abs() <= tiny {
            zero += 1;
        } else if v > 0.0 {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    (pos, neg, zero)
}

/// Upper triangle of a symmetric matrix in compressed column form.
struct Csc {
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Lower-triangle triplets (summed if repeated) to the upper triangle of
/// `P A P^T`, where `inv[old] = new`.
fn upper_csc(n: usize, lower: &[(usize, usize, f64)], inv: Option<&[usize]>) -> Csc {
    let map = |k: usize| inv.map_or(k, |p| p[k]);
    let mut t: Vec<(usize, usize, f64)> = lower
        .iter()
        .map(|&(i, j, v)| {
            let (a, b) = (map(i), map(j));
            (a.min(b), a.max(b), v)
        })
        .collect();
    t.sort_by(|x, y| (x.1, x.0).cmp(&(y.1, y.0)));
    let mut col_ptr = vec![0usize; n + 1];
    let mut row_idx = Vec::with_capacity(t.len());
    let mut values: Vec<f64> = Vec::with_capacity(t.len());
    let mut last = None;
    for (r, c, v) in t {
        if last == Some((r, c)) {
            *values.last_mut().unwrap() += v;
            continue;
        }
        last = Some((r, c));
        row_idx.push(r);
        values.push(v);
        col_ptr[c + 1] += 1;
    }
    for c in 0..n {
        col_ptr[c + 1] += col_ptr[c];
    }
    Csc {
        col_ptr,
        row_idx,
        values,
    }
}

pub(crate) struct Rhs<'a> {
    pub r_x: &'a [f64],
    pub r_s: &'a [f64],
    pub h_eq: &'a [f64],
    pub h_in: &'a [f64],
}

#[derive(Clone, Debug, Default)]
pub(crate) struct Step {
    pub dx: Vec<f64>,
    pub ds: Vec<f64>,
    pub dy_eq: Vec<f64>,
    pub dy_in: Vec<f64>,
}

impl<'a> KktMatrix<'a> {
    fn sigma_s_reg(&self, i: usize) -> f64 {
        self.sigma_s[i] + self.delta_w
    }

    /// Lower triangle of the condensed matrix, with `delta_c` raised to the floor.
    fn assemble(&self) -> Vec<(usize, usize, f64)> {
        let delta_c = self.delta_c.max(DELTA_C_FLOOR);
        let nx = self.sigma_x.len();
        let mut t: Vec<(usize, usize, f64)> = self.w.entries().to_vec();
        for j in 0..nx {
            t.push((j, j, self.sigma_x[j] + self.delta_w));
        }
        for (r, row) in self.j_in.iter().enumerate() {
            let sig = self.sigma_s_reg(r);
            for p in 0..row.cols.len() {
                for q in 0..=p {
                    let (a, b) = (row.cols[p], row.cols[q]);
                    t.push((a.max(b), a.min(b), sig * row.vals[p] * row.vals[q]));
                }
            }
        }
        for (r, row) in self.j_eq.iter().enumerate() {
            for (&c, &v) in row.cols.iter().zip(row.vals) {
                t.push((nx + r, c, v));
            }
            t.push((nx + r, nx + r, -delta_c));
        }
        t
    }

    pub(crate) fn factor(self) -> Result<Factorization<'a>, FactorError> {
        let nx = self.sigma_x.len();
        let n = nx + self.j_eq.len();
        let lower = self.assemble();
        if lower.iter().any(|e| !e.2.is_finite()) {
            return Err(FactorError::Singular);
        }

        // fill-reducing order from the pattern
        let pattern = upper_csc(n, &lower, None);
        let mut perm = vec![0usize; n];
        let mut inv = vec![0usize; n];
        let nnz = pattern.row_idx.len();
        {
            let sym = SymbolicSparseColMat::new_checked(n, n, pattern.col_ptr, None, pattern.row_idx);
            let mut mem = MemBuffer::new(amd::order_scratch::<usize>(n, nnz));
            amd::order(&mut perm, &mut inv, sym.as_ref(), amd::Control::default(), MemStack::new(&mut mem))
                .map_err(|_| FactorError::Singular)?;
        }
        let a = upper_csc(n, &lower, Some(&inv));
        let a = SparseColMat::new(
            SymbolicSparseColMat::new_checked(n, n, a.col_ptr, None, a.row_idx),
            a.values,
        );

        let mut mem = MemBuffer::new(StackReq::any_of(&[
            simplicial::prefactorize_symbolic_cholesky_scratch::<usize>(n, nnz),
            simplicial::factorize_simplicial_symbolic_cholesky_scratch::<usize>(n),
            simplicial::factorize_simplicial_numeric_ldlt_scratch::<usize, f64>(n),
        ]));
        let stack = MemStack::new(&mut mem);
        let mut etree = vec![0isize; n];
        let mut col_counts = vec![0usize; n];
        simplicial::prefactorize_symbolic_cholesky(&mut etree, &mut col_counts, a.symbolic(), stack);
        let symbolic = simplicial::factorize_simplicial_symbolic_cholesky(
            a.symbolic(),
            // filled by prefactorize_symbolic_cholesky just above
            unsafe { simplicial::EliminationTreeRef::from_inner(&etree) },
            &col_counts,
            stack,
        )
        .map_err(|_| FactorError::Singular)?;
        let mut l_values = vec![0.0; symbolic.len_val()];
        if simplicial::factorize_simplicial_numeric_ldlt::<usize, f64>(
            &mut l_values,
            a.as_ref(),
            LdltRegularization::default(),
            &symbolic,
            stack,
        )
        .is_err()
        {
            return Err(FactorError::Singular);
        }
        let d: Vec<f64> = symbolic.col_ptr()[..n].iter().map(|&p| l_values[p]).collect();
        let (pos, neg, zero) = inertia(&d, self.delta_c.max(DELTA_C_FLOOR));
        if zero > 0 {
            return Err(FactorError::Singular);
        }
        if pos != nx || neg != self.j_eq.len() {
            return Err(FactorError::WrongInertia);
        }
        Ok(Factorization {
            kkt: self,
            symbolic,
            l_values,
            perm,
        })
    }

    /// Residual of the unreduced system at `step` for right-hand side `rhs`.
    fn residual(&self, rhs: &Rhs, step: &Step) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let nx = self.sigma_x.len();
        let wdx = self.w.mul_vec(&step.dx);
        let mut res_x: Vec<f64> = rhs.r_x.iter().zip(&wdx).map(|(r, w)| -r - w).collect();
        for i in 0..nx {
            res_x[i] -= (self.sigma_x[i] + self.delta_w) * step.dx[i];
        }
        for (row, &y) in self.j_eq.iter().zip(&step.dy_eq) {
            row.axpy(-y, &mut res_x);
        }
        for (row, &y) in self.j_in.iter().zip(&step.dy_in) {
            row.axpy(-y, &mut res_x);
        }
        let res_s = (0..self.j_in.len())
            .map(|i| -rhs.r_s[i] - self.sigma_s_reg(i) * step.ds[i] + step.dy_in[i])
            .collect();
        let res_eq = self
            .j_eq
            .iter()
            .enumerate()
            .map(|(i, row)| -rhs.h_eq[i] - row.dot(&step.dx) + self.delta_c * step.dy_eq[i])
            .collect();
        let res_in = self
            .j_in
            .iter()
            .enumerate()
            .map(|(i, row)| -rhs.h_in[i] - row.dot(&step.dx) + step.ds[i])
            .collect();
        (res_x, res_s, res_eq, res_in)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl Factorization<'_> {
    fn solve_once(&self, rhs: &Rhs) -> Step {
        let k = &self.kkt;
        let nx = k.sigma_x.len();
        let neq = k.j_eq.len();
        // -r_x - Ji^T ((Ss + dw) h_in + r_s)
        let mut t: Vec<f64> = rhs.r_x.iter().map(|v| -v).collect();
        for (i, row) in k.j_in.iter().enumerate() {
            let coef = k.sigma_s_reg(i) * rhs.h_in[i] + rhs.r_s[i];
            row.axpy(-coef, &mut t);
        }
        let n = nx + neq;
        let value = |old: usize| if old < nx { t[old] } else { -rhs.h_eq[old - nx] };
        let mut b = Mat::<f64>::from_fn(n, 1, |i, _| value(self.perm[i]));
        let mut mem = MemBuffer::new(self.symbolic.solve_in_place_scratch::<f64>(1));
        SimplicialLdltRef::new(&self.symbolic, &self.l_values).solve_in_place_with_conj(
            Conj::No,
            b.as_mut(),
            Par::Seq,
            MemStack::new(&mut mem),
        );
        let mut sol = vec![0.0; n];
        for (i, &old) in self.perm.iter().enumerate() {
            sol[old] = b[(i, 0)];
        }
        let dx: Vec<f64> = sol[..nx].to_vec();
        let dy_eq: Vec<f64> = sol[nx..].to_vec();
        let ds: Vec<f64> = k
            .j_in
            .iter()
            .enumerate()
            .map(|(i, row)| row.dot(&dx) + rhs.h_in[i])
            .collect();
        let dy_in = (0..k.j_in.len())
            .map(|i| k.sigma_s_reg(i) * ds[i] + rhs.r_s[i])
            .collect();
        Step {
            dx,
            ds,
            dy_eq,
            dy_in,
        }
    }

    /// Solves with a few rounds of iterative refinement on the unreduced
    /// system.
    /// Solves against the unperturbed system, refining while the residual
    /// keeps shrinking.
    pub(crate) fn solve(&self, rhs: &Rhs) -> Step {
        let scale = 1.0
            + [rhs.r_x, rhs.r_s, rhs.h_eq, rhs.h_in]
                .iter()
                .map(|v| inf_norm(v))
                .fold(0.0, f64::max);
        let error = |step: &Step| {
            let r = self.kkt.residual(rhs, step);
            let e = [&r.0, &r.1, &r.2, &r.3]
                .iter()
                .map(|v| inf_norm(v))
                .fold(0.0, f64::max);
            (r, e)
        };
        let mut step = self.solve_once(rhs);
        let (mut res, mut err) = error(&step);
        for _ in 0..10 {
            if err <= 1e-12 * scale {
                break;
            }
            // residual = b - A step, so the correction solves A c = residual,
            // i.e. the right-hand side entries are the negated residuals
            let neg = |v: &[f64]| v.iter().map(|a| -a).collect::<Vec<_>>();
            let corr = self.solve_once(&Rhs {
                r_x: &neg(&res.0),
                r_s: &neg(&res.1),
                h_eq: &neg(&res.2),
                h_in: &neg(&res.3),
            });
            let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
            let next = Step {
                dx: add(&step.dx, &corr.dx),
                ds: add(&step.ds, &corr.ds),
                dy_eq: add(&step.dy_eq, &corr.dy_eq),
                dy_in: add(&step.dy_in, &corr.dy_in),
            };
            let (next_res, next_err) = error(&next);
            // dependent rows: the unperturbed system has no solution
            if !(next_err < 0.5 * err) {
                break;
            }
            step = next;
            res = next_res;
            err = next_err;
        }
        step
    }
}
