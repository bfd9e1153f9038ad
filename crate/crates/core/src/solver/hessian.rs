//! Partitioned quasi-Newton approximation of the Lagrangian Hessian.
//!
//! Every objective term and constraint row depends on a handful of
//! variables. Each such element keeps a small positive semidefinite block
//! approximating the Hessian of the element weighted by its current
//! coefficient (the sign of an objective term, or a row's multiplier). Blocks
//! are updated by damped BFGS from the change of the weighted element
//! gradient along the step, and the Lagrangian Hessian is their sum. Linear
//! elements never receive an update and stay exactly zero.


#[derive(Clone, Debug)]
pub(crate) struct PartitionedBfgs {
    dims: Vec<usize>,
    blocks: Vec<Vec<f64>>,
}

/// Powell damping threshold on `s^T y / s^T B s`.
const DAMPING: f64 = 0.2;
/// Below this fraction of `|s| |y|`, `s^T y` is not trusted for the initial
/// scaling.
const CURVATURE_FLOOR: f64 = 1e-8;

impl PartitionedBfgs {
    pub(crate) fn new(dims: impl IntoIterator<Item = usize>) -> Self {
        let dims: Vec<usize> = dims.into_iter().collect();
        let blocks = dims.iter().map(|&d| vec![0.0; d * d]).collect();
        Self { dims, blocks }
    }

    #[cfg(test)]
    pub(crate) fn block(&self, e: usize) -> &[f64] {
        &self.blocks[e]
    }

    /// Damped BFGS update of element `e` with step `s` and gradient change
    /// `y`, both restricted to the element's variables.
    pub(crate) fn update(&mut self, e: usize, s: &[f64], y: &[f64]) {
        let d = self.dims[e];
        debug_assert!(s.len() == d && y.len() == d);
        if d == 0 || y.iter().all(|&v| v == 0.0) || s.iter().all(|&v| v == 0.0) {
            return;
        }
        let b = &mut self.blocks[e];
        let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        if !sy.is_finite() || !yy.is_finite() {
            return;
        }
        if b.iter().all(|&v| v == 0.0) {
            // first curvature seen by this element: start from a scaled
            // identity, then apply the update
            let scale = if sy > CURVATURE_FLOOR * (ss * yy).sqrt() {
                yy / sy
            } else {
                (yy / ss).sqrt()
            };
            for i in 0..d {
                b[i * d + i] = scale;
            }
        }
        let bs: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|j| b[i * d + j] * s[j]).sum())
            .collect();
        let sbs: f64 = bs.iter().zip(s).map(|(a, b)| a * b).sum();
        if !(sbs > 0.0) {
            return;
        }
        let r: Vec<f64> = if sy < DAMPING * sbs {
            let theta = (1.0 - DAMPING) * sbs / (sbs - sy);
            y.iter()
                .zip(&bs)
                .map(|(yi, bi)| theta * yi + (1.0 - theta) * bi)
                .collect()
        } else {
            y.to_vec()
        };
        let sr: f64 = s.iter().zip(&r).map(|(a, b)| a * b).sum();
        if !(sr > 0.0) {
            return;
        }
        for i in 0..d {
            for j in 0..d {
                b[i * d + j] += r[i] * r[j] / sr - bs[i] * bs[j] / sbs;
            }
        }
    }

    /// Appends the lower triangle of every block to `out`, scattering element
    /// rows and columns through `cols[e]`.
    pub(crate) fn accumulate(&self, cols: &[Vec<usize>], out: &mut Vec<(usize, usize, f64)>) {
        for (e, block) in self.blocks.iter().enumerate() {
            let d = self.dims[e];
            let idx = &cols[e];
            for a in 0..d {
                for b in 0..=a {
                    let v = block[a * d + b];
                    if v != 0.0 {
                        out.push((idx[a], idx[b], v));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::kkt::SymMatrix;

    fn apply(a: &[[f64; 3]; 3], s: &[f64]) -> Vec<f64> {
        (0..3).map(|i| (0..3).map(|j| a[i][j] * s[j]).sum()).collect()
    }

    #[test]
    fn recovers_a_convex_quadratic() {
        let a = [[2.0, 0.5, 0.0], [0.5, 1.0, 0.3], [0.0, 0.3, 4.0]];
        let mut h = PartitionedBfgs::new([3]);
        let steps = [[1.0, 0.0, 0.2], [0.1, 1.0, -0.4], [0.3, -0.2, 1.0]];
        for _ in 0..60 {
            for s in steps {
                h.update(0, &s, &apply(&a, &s));
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                assert!((h.block(0)[i * 3 + j] - a[i][j]).abs() < 1e-8, "{:?}", h.block(0));
            }
        }
    }

    #[test]
    fn block_stays_positive_semidefinite_on_negative_curvature() {
        let a = [[-1.0, 2.0, 0.0], [2.0, -3.0, 0.0], [0.0, 0.0, 1.0]];
        let mut h = PartitionedBfgs::new([3]);
        let steps = [[1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.3, -0.7, 0.2]];
        for s in steps {
            h.update(0, &s, &apply(&a, &s));
            let b = h.block(0);
            // check v^T B v >= 0 on a spread of directions
            for v in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, -1.0, 0.5], [0.2, 0.9, -0.3]] {
                let q: f64 = (0..3)
                    .map(|i| (0..3).map(|j| v[i] * b[i * 3 + j] * v[j]).sum::<f64>())
                    .sum();
                assert!(q >= -1e-12, "{q}");
            }
        }
    }

    #[test]
    fn linear_elements_stay_zero() {
        let mut h = PartitionedBfgs::new([2]);
        h.update(0, &[1.0, -2.0], &[0.0, 0.0]);
        assert_eq!(h.block(0), &[0.0; 4]);
    }

    #[test]
    fn accumulate_scatters_blocks() {
        let mut h = PartitionedBfgs::new([1, 1]);
        h.update(0, &[1.0], &[2.0]);
        h.update(1, &[1.0], &[3.0]);
        let mut out = Vec::new();
        h.accumulate(&[vec![1], vec![1]], &mut out);
        let w = SymMatrix::from_triplets(2, out);
        assert_eq!(w.entries(), &[(1, 1, 5.0)]);
    }
}
