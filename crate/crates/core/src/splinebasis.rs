//! B-spline and natural cubic spline bases.
//!
//! B-splines are evaluated with the Cox–de Boor recursion on a clamped knot
//! vector (each boundary knot repeated `degree + 1` times), so rows form a
//! partition of unity on the domain. The natural cubic basis is the cubic
//! B-spline basis projected onto the null space of the second-derivative
//! constraints at both boundary knots, continued linearly outside them.
//!
//! Neither basis appends a separate intercept column: a B-spline basis has
//! `internal_knots + degree + 1` columns and a natural cubic basis has
//! `internal_knots + 2`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::Real;

pub type BasisMatrix<T> = Matrix<T>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("invalid basis specification: {0}")]
    InvalidSpec(String),
    #[error("x = {x} lies outside the basis domain [{lo}, {hi}]")]
    OutOfDomain { x: f64, lo: f64, hi: f64 },
    #[error("non-finite evaluation point")]
    NonFinite,
    #[error("expected a {expected} basis")]
    WrongKind { expected: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    BSpline { degree: usize },
    NaturalCubic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec<T> {
    pub kind: BasisKind,
    pub internal_knots: Vec<T>,
    pub boundary: (T, T),
}

impl<T: Real> BasisSpec<T> {
    pub fn bspline(degree: usize, internal_knots: Vec<T>, lo: T, hi: T) -> Result<Self, SplineError> {
        let spec = Self {
            kind: BasisKind::BSpline { degree },
            internal_knots,
            boundary: (lo, hi),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn natural_cubic(internal_knots: Vec<T>, lo: T, hi: T) -> Result<Self, SplineError> {
        let spec = Self {
            kind: BasisKind::NaturalCubic,
            internal_knots,
            boundary: (lo, hi),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SplineError> {
        let (lo, hi) = self.boundary;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(SplineError::InvalidSpec(format!(
                "boundary must satisfy lo < hi, got ({lo}, {hi})"
            )));
        }
        let mut prev = lo;
        for &k in &self.internal_knots {
            if !(k > prev && k < hi) {
                return Err(SplineError::InvalidSpec(format!(
                    "internal knots must be strictly increasing inside ({lo}, {hi}); offending knot {k}"
                )));
            }
            prev = k;
        }
        Ok(())
    }

    pub fn degree(&self) -> usize {
        match self.kind {
            BasisKind::BSpline { degree } => degree,
            BasisKind::NaturalCubic => 3,
        }
    }

    pub fn ncols(&self) -> usize {
        match self.kind {
            BasisKind::BSpline { degree } => self.internal_knots.len() + degree + 1,
            BasisKind::NaturalCubic => self.internal_knots.len() + 2,
        }
    }
}

/// What a B-spline basis does with points outside its boundary knots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DomainPolicy {
    #[default]
    Strict,
    Clamp,
}

/// A basis with its knot vector (and, for natural splines, the constraint
/// null space) precomputed, ready for repeated row evaluation.
#[derive(Debug, Clone)]
pub struct SplineBasis<T> {
    spec: BasisSpec<T>,
    knots: Vec<T>,
    degree: usize,
    policy: DomainPolicy,
    /// `(internal + 4) × (internal + 2)` projection for natural splines.
    null_space: Option<Matrix<T>>,
}

impl<T: Real> SplineBasis<T> {
    pub fn new(spec: BasisSpec<T>) -> Result<Self, SplineError> {
        spec.validate()?;
        let degree = spec.degree();
        let (lo, hi) = spec.boundary;
        let mut knots = Vec::with_capacity(spec.internal_knots.len() + 2 * (degree + 1));
        knots.extend(std::iter::repeat(lo).take(degree + 1));
        knots.extend_from_slice(&spec.internal_knots);
        knots.extend(std::iter::repeat(hi).take(degree + 1));
        let mut basis = Self {
            spec,
            knots,
            degree,
            policy: DomainPolicy::Strict,
            null_space: None,
        };
        if basis.spec.kind == BasisKind::NaturalCubic {
            basis.null_space = Some(basis.boundary_null_space());
        }
        Ok(basis)
    }

    pub fn with_policy(mut self, policy: DomainPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn spec(&self) -> &BasisSpec<T> {
        &self.spec
    }

    pub fn ncols(&self) -> usize {
        self.spec.ncols()
    }

    fn n_bspline(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    fn span(&self, x: T) -> usize {
        let n = self.n_bspline();
        let p = self.degree;
        if x >= self.knots[n] {
            return n - 1;
        }
        // first index i in [p, n-1] with knots[i] <= x < knots[i+1]
        let mut lo = p;
        let mut hi = n;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Nonzero B-spline values and derivatives up to `nd` at an in-domain
    /// point. `ders[k][j]` is the k-th derivative of basis `span - degree + j`.
    fn local_derivatives(&self, x: T, nd: usize) -> (usize, Vec<Vec<T>>) {
        let p = self.degree;
        let u = &self.knots;
        let i = self.span(x);
        let zero = T::zero();
        let mut ndu = vec![vec![zero; p + 1]; p + 1];
        let mut left = vec![zero; p + 1];
        let mut right = vec![zero; p + 1];
        ndu[0][0] = T::one();
        for j in 1..=p {
            left[j] = x - u[i + 1 - j];
            right[j] = u[i + j] - x;
            let mut saved = zero;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![vec![zero; p + 1]; nd + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = [vec![zero; p + 1], vec![zero; p + 1]];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = T::one();
            for k in 1..=nd.min(p) {
                let mut d = zero;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if rk >= 0 {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1: usize = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2: usize = if r as isize - 1 <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut fac = T::from_usize_lossy(p);
        for (k, row) in ders.iter_mut().enumerate().skip(1) {
            if k > p {
                row.iter_mut().for_each(|v| *v = zero);
                continue;
            }
            row.iter_mut().for_each(|v| *v *= fac);
            fac *= T::from_usize_lossy(p - k);
        }
        (i, ders)
    }

    /// Full B-spline row (all `n_bspline` columns) of the `order`-th derivative
    /// at an in-domain point.
    fn bspline_row(&self, x: T, order: usize, out: &mut [T]) {
        out.iter_mut().for_each(|v| *v = T::zero());
        let (span, ders) = self.local_derivatives(x, order);
        let first = span - self.degree;
        for (j, &v) in ders[order].iter().enumerate() {
            out[first + j] = v;
        }
    }

    fn boundary_null_space(&self) -> Matrix<T> {
        let n = self.n_bspline();
        let (lo, hi) = self.spec.boundary;
        let mut ct = Matrix::zeros(n, 2);
        let mut row = vec![T::zero(); n];
        for (c, &x) in [lo, hi].iter().enumerate() {
            self.bspline_row(x, 2, &mut row);
            for (i, &v) in row.iter().enumerate() {
                ct[(i, c)] = v;
            }
        }
        let q = householder_q(&ct);
        let cols: Vec<usize> = (2..n).collect();
        let rows: Vec<usize> = (0..n).collect();
        q.select(&rows, &cols)
    }

    /// Writes the basis row for `x` into `out` (length `ncols()`).
    pub fn eval_into(&self, x: T, out: &mut [T]) -> Result<(), SplineError> {
        self.eval_derivative_into(x, 0, out)
    }

    /// Writes the `order`-th derivative of the basis row at `x`.
    pub fn eval_derivative_into(&self, x: T, order: usize, out: &mut [T]) -> Result<(), SplineError> {
        assert_eq!(out.len(), self.ncols(), "output row has wrong width");
        if !x.is_finite() {
            return Err(SplineError::NonFinite);
        }
        let (lo, hi) = self.spec.boundary;
        match &self.null_space {
            None => {
                let x = if x < lo || x > hi {
                    match self.policy {
                        DomainPolicy::Strict => {
                            return Err(SplineError::OutOfDomain {
                                x: x.as_f64(),
                                lo: lo.as_f64(),
                                hi: hi.as_f64(),
                            })
                        }
                        DomainPolicy::Clamp => x.max(lo).min(hi),
                    }
                } else {
                    x
                };
                self.bspline_row(x, order, out);
            }
            Some(z) => {
                let n = self.n_bspline();
                let mut full = vec![T::zero(); n];
                if x < lo || x > hi {
                    let edge = if x < lo { lo } else { hi };
                    let mut slope = vec![T::zero(); n];
                    self.bspline_row(edge, 1, &mut slope);
                    match order {
                        0 => {
                            self.bspline_row(edge, 0, &mut full);
                            let dx = x - edge;
                            for (f, s) in full.iter_mut().zip(&slope) {
                                *f += dx * *s;
                            }
                        }
                        1 => full = slope,
                        _ => {}
                    }
                } else {
                    self.bspline_row(x, order, &mut full);
                }
                for (j, o) in out.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for (i, &f) in full.iter().enumerate() {
                        if f != T::zero() {
                            acc += f * z[(i, j)];
                        }
                    }
                    *o = acc;
                }
            }
        }
        Ok(())
    }

    pub fn eval_row(&self, x: T) -> Result<Vec<T>, SplineError> {
        let mut out = vec![T::zero(); self.ncols()];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    pub fn eval(&self, xs: &[T]) -> Result<BasisMatrix<T>, SplineError> {
        let k = self.ncols();
        let mut m = Matrix::zeros(xs.len(), k);
        for (i, &x) in xs.iter().enumerate() {
            self.eval_into(x, m.row_mut(i))?;
        }
        Ok(m)
    }
}

/// Orthogonal factor `Q` (n × n) of a Householder QR of `a` (n × m, m ≤ n).
fn householder_q<T: Real>(a: &Matrix<T>) -> Matrix<T> {
    let n = a.nrows();
    let m = a.ncols();
    let mut r = a.clone();
    let mut q = Matrix::identity(n);
    for k in 0..m.min(n) {
        let norm = (k..n).map(|i| r[(i, k)] * r[(i, k)]).sum::<T>().sqrt();
        if norm == T::zero() {
            continue;
        }
        let alpha = if r[(k, k)] > T::zero() { -norm } else { norm };
        let mut v = vec![T::zero(); n];
        v[k] = r[(k, k)] - alpha;
        for i in (k + 1)..n {
            v[i] = r[(i, k)];
        }
        let vnorm2: T = v.iter().map(|&x| x * x).sum();
        if vnorm2 == T::zero() {
            continue;
        }
        let two = T::lit(2.0);
        for j in 0..m {
            let s: T = (k..n).map(|i| v[i] * r[(i, j)]).sum();
            let f = two * s / vnorm2;
            for i in k..n {
                r[(i, j)] -= f * v[i];
            }
        }
        // q <- q H
        for i in 0..n {
            let s: T = (k..n).map(|c| q[(i, c)] * v[c]).sum();
            let f = two * s / vnorm2;
            for c in k..n {
                q[(i, c)] -= f * v[c];
            }
        }
    }
    q
}

/// Evaluates a B-spline basis at every point of `xs`.
pub fn bspline_eval<T: Real>(
    spec: &BasisSpec<T>,
    xs: &[T],
    policy: DomainPolicy,
) -> Result<BasisMatrix<T>, SplineError> {
    if !matches!(spec.kind, BasisKind::BSpline { .. }) {
        return Err(SplineError::WrongKind { expected: "B-spline" });
    }
    SplineBasis::new(spec.clone())?.with_policy(policy).eval(xs)
}

/// Evaluates a natural cubic spline basis; points outside the boundary knots
/// are extrapolated linearly.
pub fn natural_cubic_eval<T: Real>(spec: &BasisSpec<T>, xs: &[T]) -> Result<BasisMatrix<T>, SplineError> {
    if spec.kind != BasisKind::NaturalCubic {
        return Err(SplineError::WrongKind { expected: "natural cubic" });
    }
    SplineBasis::new(spec.clone())?.eval(xs)
}

/// Internal lag knots equally spaced on the log scale between lag 1 and
/// `max_lag`: `max_lag^(i/(k+1))` for `i = 1..=k`.
pub fn log_lag_knots<T: Real>(max_lag: usize, k: usize) -> Vec<T> {
    let l = T::from_usize_lossy(max_lag);
    let denom = T::from_usize_lossy(k + 1);
    (1..=k)
        .map(|i| l.powf(T::from_usize_lossy(i) / denom))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn degree_zero_is_an_indicator() {
        let spec = BasisSpec::bspline(0, vec![], 0.0, 1.0).unwrap();
        let m = bspline_eval(&spec, &[0.5], DomainPolicy::Strict).unwrap();
        assert_eq!(m.ncols(), 1);
        assert_eq!(m[(0, 0)], 1.0);
    }

    #[test]
    fn linear_hat_functions() {
        let spec = BasisSpec::bspline(1, vec![], 0.0, 1.0).unwrap();
        let m = bspline_eval(&spec, &[0.25], DomainPolicy::Strict).unwrap();
        assert!(close(m[(0, 0)], 0.75, 1e-15));
        assert!(close(m[(0, 1)], 0.25, 1e-15));
    }

    #[test]
    fn quadratic_with_midpoint_knot_sums_to_one_at_the_knot() {
        let spec = BasisSpec::bspline(2, vec![0.5], 0.0, 1.0).unwrap();
        let m = bspline_eval(&spec, &[0.5, 0.0, 1.0], DomainPolicy::Strict).unwrap();
        assert_eq!(m.ncols(), 4);
        for i in 0..3 {
            let s: f64 = m.row(i).iter().sum();
            assert!(close(s, 1.0, 1e-15));
        }
        // at the right boundary only the last function is active
        assert_eq!(m.row(2), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn quadratic_against_closed_form() {
        // degree 2, knots 0,0,0,1,1,1: Bernstein polynomials
        let spec = BasisSpec::bspline(2, vec![], 0.0, 1.0).unwrap();
        let x = 0.3;
        let m = bspline_eval(&spec, &[x], DomainPolicy::Strict).unwrap();
        assert!(close(m[(0, 0)], (1.0 - x) * (1.0 - x), 1e-15));
        assert!(close(m[(0, 1)], 2.0 * x * (1.0 - x), 1e-15));
        assert!(close(m[(0, 2)], x * x, 1e-15));
    }

    #[test]
    fn strict_domain_rejects_and_clamp_clamps() {
        let spec = BasisSpec::bspline(2, vec![0.5], 0.0, 1.0).unwrap();
        assert!(matches!(
            bspline_eval(&spec, &[1.5], DomainPolicy::Strict),
            Err(SplineError::OutOfDomain { .. })
        ));
        let a = bspline_eval(&spec, &[1.5], DomainPolicy::Clamp).unwrap();
        let b = bspline_eval(&spec, &[1.0], DomainPolicy::Clamp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs() {
        assert!(BasisSpec::bspline(2, vec![], 1.0, 1.0).is_err());
        assert!(BasisSpec::bspline(2, vec![1.5], 0.0, 1.0).is_err());
        assert!(BasisSpec::natural_cubic(vec![0.6, 0.4], 0.0, 1.0).is_err());
        let ns = BasisSpec::natural_cubic(vec![0.5], 0.0, 1.0).unwrap();
        assert!(matches!(
            bspline_eval(&ns, &[0.5], DomainPolicy::Strict),
            Err(SplineError::WrongKind { .. })
        ));
    }

    #[test]
    fn natural_spline_dimensions() {
        let spec = BasisSpec::natural_cubic(vec![1.0, 2.0], 0.0, 3.0).unwrap();
        let m = natural_cubic_eval(&spec, &[0.0, 1.5, 3.0]).unwrap();
        assert_eq!(m.ncols(), 4);
        assert!(m.is_finite());
    }

    #[test]
    fn natural_spline_second_derivative_vanishes_at_boundaries() {
        let spec = BasisSpec::natural_cubic(vec![3f64.sqrt()], 0.0, 3.0).unwrap();
        let basis = SplineBasis::new(spec).unwrap();
        let mut d2 = vec![0.0; 3];
        for x in [0.0, 3.0] {
            basis.eval_derivative_into(x, 2, &mut d2).unwrap();
            assert!(d2.iter().all(|v| v.abs() < 1e-12), "{d2:?}");
        }
        // interior second derivative is not identically zero
        basis.eval_derivative_into(1.0, 2, &mut d2).unwrap();
        assert!(d2.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn natural_spline_extrapolates_linearly() {
        let spec = BasisSpec::natural_cubic(vec![1.7], 0.0, 3.0).unwrap();
        let m = natural_cubic_eval(&spec, &[4.0, 5.0, 6.0]).unwrap();
        for j in 0..3 {
            let d1 = m[(1, j)] - m[(0, j)];
            let d2 = m[(2, j)] - m[(1, j)];
            assert!(close(d1, d2, 1e-12));
        }
    }

    #[test]
    fn natural_spline_spans_linear_functions() {
        // constant and identity must be reproducible from the basis
        let spec = BasisSpec::natural_cubic(vec![1.0, 2.0], 0.0, 3.0).unwrap();
        let xs: Vec<f64> = (0..=30).map(|i| i as f64 * 0.1).collect();
        let b = natural_cubic_eval(&spec, &xs).unwrap();
        let bt = b.transpose();
        let gram = bt.matmul(&b);
        let ch = crate::linalg::Cholesky::new(&gram).unwrap();
        let coef = ch.solve(&bt.mul_vec(&xs));
        let fitted = b.mul_vec(&coef);
        for (f, x) in fitted.iter().zip(&xs) {
            assert!(close(*f, *x, 1e-10));
        }
    }

    #[test]
    fn log_knots() {
        let k: Vec<f64> = log_lag_knots(3, 1);
        assert!(close(k[0], 3f64.sqrt(), 1e-15));
        let k: Vec<f64> = log_lag_knots(5, 2);
        assert!(close(k[0], 1.7100, 1e-4) && close(k[1], 2.9240, 1e-4));
        assert!(log_lag_knots::<f64>(7, 0).is_empty());
    }

    #[test]
    fn single_precision_partition_of_unity() {
        let spec = BasisSpec::bspline(2, vec![0.4f32], 0.0, 1.0).unwrap();
        let m = bspline_eval(&spec, &[0.1, 0.4, 0.77], DomainPolicy::Strict).unwrap();
        for i in 0..3 {
            let s: f32 = m.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
