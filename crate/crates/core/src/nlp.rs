//! Generic smooth nonlinear program over an expression graph:
//! minimize `objective(z)` subject to `lower <= row(z) <= upper` for every
//! constraint row and `var_lower <= z <= var_upper`.

use thiserror::Error;

use crate::exprgraph::{EvalError, ExprRef, ExpressionGraph};

/// One constraint row `lower <= expr <= upper`. Either bound may be infinite;
/// `lower == upper` is an equality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintRow {
    pub expr: ExprRef,
    pub lower: f64,
    pub upper: f64,
}

impl ConstraintRow {
    pub fn new(expr: ExprRef, lower: f64, upper: f64) -> Self {
        Self { expr, lower, upper }
    }

    pub fn equal(expr: ExprRef, value: f64) -> Self {
        Self::new(expr, value, value)
    }

    pub fn at_most(expr: ExprRef, upper: f64) -> Self {
        Self::new(expr, f64::NEG_INFINITY, upper)
    }

    pub fn at_least(expr: ExprRef, lower: f64) -> Self {
        Self::new(expr, lower, f64::INFINITY)
    }

    pub fn is_equality(&self) -> bool {
        self.lower == self.upper
    }

    /// Amount by which `value` lies outside `[lower, upper]`.
    pub fn violation(&self, value: f64) -> f64 {
        interval_violation(value, self.lower, self.upper)
    }
}

pub(crate) fn interval_violation(value: f64, lower: f64, upper: f64) -> f64 {
    if value.is_nan() {
        return f64::INFINITY;
    }
    (lower - value).max(value - upper).max(0.0)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error("bound vectors have length {lower}/{upper}, expected {dim}")]
    BoundLength { dim: usize, lower: usize, upper: usize },
    #[error("expression {0} does not belong to the graph")]
    InvalidRef(ExprRef),
    #[error("bounds of {what} {index} are empty ({lower} > {upper})")]
    EmptyBounds {
        what: &'static str,
        index: usize,
        lower: f64,
        upper: f64,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Debug)]
pub struct Nlp {
    pub graph: ExpressionGraph,
    pub objective: ExprRef,
    pub rows: Vec<ConstraintRow>,
    pub var_lower: Vec<f64>,
    pub var_upper: Vec<f64>,
}

impl Nlp {
    /// Number of decision variables.
    pub fn dimension(&self) -> usize {
        self.graph.variable_count()
    }

    /// Checks bound shapes and that every expression is a valid node over the
    /// decision vector.
    pub fn validate(&self) -> Result<(), NlpError> {
        let dim = self.dimension();
        if self.var_lower.len() != dim || self.var_upper.len() != dim {
            return Err(NlpError::BoundLength {
                dim,
                lower: self.var_lower.len(),
                upper: self.var_upper.len(),
            });
        }
        for (i, (&lo, &hi)) in self.var_lower.iter().zip(&self.var_upper).enumerate() {
            if lo > hi || lo.is_nan() || hi.is_nan() {
                return Err(NlpError::EmptyBounds {
                    what: "variable",
                    index: i,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.lower > row.upper || row.lower.is_nan() || row.upper.is_nan() {
                return Err(NlpError::EmptyBounds {
                    what: "row",
                    index: i,
                    lower: row.lower,
                    upper: row.upper,
                });
            }
        }
        let len = self.graph.len();
        for r in std::iter::once(self.objective).chain(self.rows.iter().map(|r| r.expr)) {
            if r.index() >= len {
                return Err(NlpError::InvalidRef(r));
            }
        }
        Ok(())
    }

    pub fn roots(&self) -> Vec<ExprRef> {
        self.rows.iter().map(|r| r.expr).collect()
    }

    pub fn objective_value(&self, z: &[f64]) -> Result<f64, EvalError> {
        Ok(self.graph.evaluate(&[self.objective], z)?[0])
    }

    pub fn row_values(&self, z: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.graph.evaluate(&self.roots(), z)
    }

    /// Largest violation over all rows and variable bounds at `z`.
    pub fn max_violation(&self, z: &[f64]) -> Result<f64, EvalError> {
        let values = self.row_values(z)?;
        let rows = self
            .rows
            .iter()
            .zip(&values)
            .map(|(row, &v)| row.violation(v));
        let bounds = z
            .iter()
            .zip(self.var_lower.iter().zip(&self.var_upper))
            .map(|(&v, (&lo, &hi))| interval_violation(v, lo, hi));
        Ok(rows.chain(bounds).fold(0.0, f64::max))
    }
}
