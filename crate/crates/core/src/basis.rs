//! B-spline bases on clamped uniform knot vectors and the difference-penalty
//! operators applied to their coefficients.
//!
//! Every spline layer in the network evaluates one of these bases on inputs
//! squashed into the basis domain, and penalizes its coefficient rows with the
//! `r`-th order difference penalty `Dᵀ·D`.

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum BasisError {
    #[error("need num_basis >= degree+1 ({degree}+1), got {num_basis}")]
    TooFewBasisFunctions { num_basis: usize, degree: usize },

    #[error("domain [{a}, {b}] is degenerate: lower bound must be strictly below upper bound")]
    DegenerateDomain { a: f64, b: f64 },

    #[error("difference order must satisfy 1 <= order <= num_basis-1, got order {order} with {num_basis} basis functions")]
    InvalidDifferenceOrder { order: usize, num_basis: usize },
}

static CLAMP_LOGGED: AtomicBool = AtomicBool::new(false);

/// A clamped knot sequence defining `num_basis` B-spline basis functions of
/// the given degree on `[domain.0, domain.1]`.
///
/// Invariants: knots are nondecreasing, the first and last `degree + 1`
/// entries repeat the domain endpoints, and the basis forms a partition of
/// unity on the domain with at most `degree + 1` functions nonzero at any
/// point.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    pub degree: usize,
    pub num_basis: usize,
    pub domain: (f64, f64),
    pub knots: Vec<f64>,
}

impl KnotVector {
    /// Builds a clamped knot vector with equally spaced interior knots.
    pub fn uniform(num_basis: usize, degree: usize, domain: (f64, f64)) -> Result<Self, BasisError> {
        if num_basis < degree + 1 {
            return Err(BasisError::TooFewBasisFunctions { num_basis, degree });
        }
        let (a, b) = domain;
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(BasisError::DegenerateDomain { a, b });
        }
        let interior = num_basis - degree - 1;
        let mut knots = Vec::with_capacity(num_basis + degree + 1);
        knots.extend(std::iter::repeat(a).take(degree + 1));
        for i in 1..=interior {
            knots.push(a + (b - a) * i as f64 / (interior + 1) as f64);
        }
        knots.extend(std::iter::repeat(b).take(degree + 1));
        Ok(KnotVector {
            degree,
            num_basis,
            domain,
            knots,
        })
    }

    /// Clamps `x` into the domain. Out-of-domain inputs only occur through
    /// floating-point edge effects upstream, so the event is logged once.
    fn clamp(&self, x: f64) -> f64 {
        let (a, b) = self.domain;
        if x < a || x > b {
            if !CLAMP_LOGGED.swap(true, Ordering::Relaxed) {
                log::warn!("basis input {x} outside [{a}, {b}]; clamping (reported once)");
            }
            x.clamp(a, b)
        } else {
            x
        }
    }

    /// Index of the knot span containing `x`: the largest `i` with
    /// `knots[i] <= x < knots[i+1]`, mapping `x = b` onto the last span.
    fn find_span(&self, x: f64) -> usize {
        let n = self.num_basis;
        let d = self.degree;
        if x >= self.knots[n] {
            return n - 1;
        }
        if x <= self.knots[d] {
            return d;
        }
        let mut lo = d;
        let mut hi = n;
        let mut mid = (lo + hi) / 2;
        while x < self.knots[mid] || x >= self.knots[mid + 1] {
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
            mid = (lo + hi) / 2;
        }
        mid
    }

    /// Triangular Cox–de Boor scheme: values of the `up_to + 1` basis
    /// functions of degree `up_to` that are nonzero on the span.
    fn span_values(&self, x: f64, span: usize, up_to: usize) -> Vec<f64> {
        let mut vals = vec![0.0; up_to + 1];
        let mut left = vec![0.0; up_to + 1];
        let mut right = vec![0.0; up_to + 1];
        vals[0] = 1.0;
        for j in 1..=up_to {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            vals[j] = saved;
        }
        vals
    }

    /// Writes the `degree + 1` possibly-nonzero basis values at `x` into
    /// `out` and returns the index of the first of them.
    pub(crate) fn eval_nonzero_into(&self, x: f64, out: &mut [f64]) -> usize {
        debug_assert_eq!(out.len(), self.degree + 1);
        let x = self.clamp(x);
        let span = self.find_span(x);
        let vals = self.span_values(x, span, self.degree);
        out.copy_from_slice(&vals);
        span - self.degree
    }

    /// Evaluates all `num_basis` basis functions at `x`.
    ///
    /// Entries are nonnegative, sum to 1, and at most `degree + 1` of them
    /// are nonzero.
    pub fn eval(&self, x: f64) -> DVector<f64> {
        let mut buf = vec![0.0; self.degree + 1];
        let start = self.eval_nonzero_into(x, &mut buf);
        let mut out = DVector::zeros(self.num_basis);
        for (offset, v) in buf.iter().enumerate() {
            out[start + offset] = *v;
        }
        out
    }

    /// Evaluates the basis at every entry of `xs`, one row per input.
    pub fn eval_matrix(&self, xs: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(xs.len(), self.num_basis);
        let mut buf = vec![0.0; self.degree + 1];
        for (i, &x) in xs.iter().enumerate() {
            let start = self.eval_nonzero_into(x, &mut buf);
            for (offset, v) in buf.iter().enumerate() {
                out[(i, start + offset)] = *v;
            }
        }
        out
    }

    /// Writes the derivatives of the `degree + 1` local basis functions at
    /// `x` into `out`; returns the first index. Degenerate knot spans (zero
    /// denominators at the clamped ends) contribute nothing.
    pub(crate) fn eval_derivative_nonzero_into(&self, x: f64, out: &mut [f64]) -> usize {
        debug_assert_eq!(out.len(), self.degree + 1);
        let d = self.degree;
        let x = self.clamp(x);
        let span = self.find_span(x);
        if d == 0 {
            out.fill(0.0);
            return span;
        }
        // Degree d-1 values on the same span: indices span-d+1 ..= span.
        let low = self.span_values(x, span, d - 1);
        let start = span - d;
        for offset in 0..=d {
            let k = start + offset;
            let left = if offset >= 1 { low[offset - 1] } else { 0.0 };
            let right = if offset < d { low[offset] } else { 0.0 };
            let denom_l = self.knots[k + d] - self.knots[k];
            let denom_r = self.knots[k + d + 1] - self.knots[k + 1];
            let term_l = if denom_l > 0.0 { left / denom_l } else { 0.0 };
            let term_r = if denom_r > 0.0 { right / denom_r } else { 0.0 };
            out[offset] = d as f64 * (term_l - term_r);
        }
        start
    }

    /// Derivatives `dB_k/dx` of all basis functions at `x`. Entries sum to
    /// zero; a degree-0 basis has derivative zero everywhere.
    pub fn eval_derivative(&self, x: f64) -> DVector<f64> {
        let mut buf = vec![0.0; self.degree + 1];
        let start = self.eval_derivative_nonzero_into(x, &mut buf);
        let mut out = DVector::zeros(self.num_basis);
        if self.degree == 0 {
            return out;
        }
        for (offset, v) in buf.iter().enumerate() {
            out[start + offset] = *v;
        }
        out
    }
}

/// The `r`-th order difference matrix acting on coefficient vectors of
/// length `num_basis`, plus the induced quadratic penalty `matrixᵀ·matrix`.
///
/// Rows carry the sign convention of the displayed first/second difference
/// matrices (leading entry −1), which leaves the penalty unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceOp {
    pub num_basis: usize,
    pub order: usize,
    pub matrix: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
}

impl DifferenceOp {
    pub fn new(num_basis: usize, order: usize) -> Result<Self, BasisError> {
        if order == 0 || order >= num_basis {
            return Err(BasisError::InvalidDifferenceOrder { order, num_basis });
        }
        let mut matrix = DMatrix::<f64>::identity(num_basis, num_basis);
        for step in 0..order {
            let rows = num_basis - step;
            let mut next = DMatrix::<f64>::zeros(rows - 1, num_basis);
            for i in 0..rows - 1 {
                for j in 0..num_basis {
                    next[(i, j)] = matrix[(i + 1, j)] - matrix[(i, j)];
                }
            }
            matrix = next;
        }
        if order % 2 == 0 {
            matrix.neg_mut();
        }
        let penalty = matrix.transpose() * &matrix;
        Ok(DifferenceOp {
            num_basis,
            order,
            matrix,
            penalty,
        })
    }

    /// Penalty value `‖D·w‖²` for one coefficient row.
    pub fn penalty_value(&self, w: &DVector<f64>) -> f64 {
        let dw = &self.matrix * w;
        dw.norm_squared()
    }
}
