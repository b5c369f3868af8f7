//! Conditional logistic regression for 1:M matched strata (one case per
//! stratum), fitted by Newton–Raphson with step halving.
//!
//! The stratum contribution is `xᵀ_case β − log Σ_members exp(xᵀβ)`. Fits that
//! run away (quasi-separation) are reported through [`StabilityFlags`] rather
//! than as errors, so a batch of fits never aborts on one sparse stratum set.

use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{dependent_columns, Cholesky, Matrix};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClogitError {
    #[error("stratum {id:?}: {reason}")]
    InvalidStratum { id: String, reason: String },
    #[error("strata have inconsistent row widths ({expected} vs {found})")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no stratum carries within-stratum covariate variation")]
    NoInformativeStrata,
}

/// One matched set: a case row and at least one control row.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum<T> {
    pub id: String,
    width: usize,
    /// Row-major member rows; the case is row `case`.
    rows: Vec<T>,
    case: usize,
}

impl<T: Real> Stratum<T> {
    /// Builds a stratum from `(design_row, is_case)` members.
    pub fn new(id: impl Into<String>, members: Vec<(Vec<T>, bool)>) -> Result<Self, ClogitError> {
        let id = id.into();
        let invalid = |reason: &str| ClogitError::InvalidStratum {
            id: id.clone(),
            reason: reason.to_string(),
        };
        let cases = members.iter().filter(|(_, c)| *c).count();
        if cases != 1 {
            return Err(invalid(&format!("expected exactly one case, found {cases}")));
        }
        if members.len() < 2 {
            return Err(invalid("needs at least one control"));
        }
        let width = members[0].0.len();
        if members.iter().any(|(r, _)| r.len() != width) {
            return Err(invalid("member rows differ in width"));
        }
        let case = members.iter().position(|(_, c)| *c).unwrap();
        let rows = members.into_iter().flat_map(|(r, _)| r).collect();
        Ok(Self { id, width, rows, case })
    }

    /// Case row first, then controls.
    pub fn from_case_controls(id: impl Into<String>, case: Vec<T>, controls: Vec<Vec<T>>) -> Result<Self, ClogitError> {
        let mut members = Vec::with_capacity(controls.len() + 1);
        members.push((case, true));
        members.extend(controls.into_iter().map(|c| (c, false)));
        Self::new(id, members)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.width.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn member(&self, i: usize) -> &[T] {
        &self.rows[i * self.width..(i + 1) * self.width]
    }

    pub fn case_index(&self) -> usize {
        self.case
    }

    pub fn case_row(&self) -> &[T] {
        self.member(self.case)
    }

    /// True when every member row equals the case row.
    pub fn is_uninformative(&self) -> bool {
        let case = self.case_row();
        (0..self.len()).all(|i| self.member(i) == case)
    }
}

#[derive(Debug, Clone)]
pub struct ClogitOptions<T> {
    /// Gradient max-norm for convergence.
    pub tol: T,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// |β| beyond this on any coefficient is treated as divergence.
    pub divergence_bound: T,
    pub rank_tol: T,
    pub stability: StabilityRule<T>,
}

impl<T: Real> Default for ClogitOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-8),
            max_iter: 50,
            max_halvings: 20,
            divergence_bound: T::lit(50.0),
            rank_tol: T::lit(1e-10),
            stability: StabilityRule::default(),
        }
    }
}

/// Thresholds of the subgroup stability rule.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRule<T> {
    pub max_se: T,
    pub max_or: T,
    /// Coefficients the rule inspects; `None` means all of them.
    pub columns: Option<Range<usize>>,
}

impl<T: Real> Default for StabilityRule<T> {
    fn default() -> Self {
        Self {
            max_se: T::lit(10.0),
            max_or: T::lit(100.0),
            columns: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct StabilityFlags {
    /// Non-convergence, divergence, or a non-finite coefficient/variance.
    pub nonconvergence: bool,
    /// Some inspected standard error exceeds the threshold.
    pub large_se: bool,
    /// Some inspected `exp(β)` is non-finite or exceeds the threshold.
    pub extreme_or: bool,
    pub is_stable: bool,
}

impl StabilityFlags {
    /// `;`-joined failing components, empty when stable.
    pub fn reason(&self) -> String {
        let mut parts = Vec::new();
        if self.nonconvergence {
            parts.push("nonconvergence");
        }
        if self.large_se {
            parts.push("large_se");
        }
        if self.extreme_or {
            parts.push("extreme_or");
        }
        parts.join(";")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClogitFit<T = f64> {
    /// Coefficients; aliased columns are reported as 0.
    pub beta: Vec<T>,
    /// Inverse observed information; NaN rows/columns for aliased coefficients.
    pub cov: Matrix<T>,
    pub converged: bool,
    /// Coefficients exceeded the divergence bound or became non-finite.
    pub diverged: bool,
    pub iterations: usize,
    pub loglik: T,
    pub gradient_max_norm: T,
    /// Columns without within-stratum information (fixed at 0).
    pub aliased: Vec<bool>,
    pub n_strata: usize,
    pub n_dropped_strata: usize,
    pub stability: StabilityFlags,
}

impl<T: Real> ClogitFit<T> {
    pub fn se(&self) -> Vec<T> {
        (0..self.beta.len()).map(|i| self.cov[(i, i)].sqrt()).collect()
    }
}

/// Flags a fit against the stability thresholds.
pub fn stability_check<T: Real>(fit: &ClogitFit<T>, rule: &StabilityRule<T>) -> StabilityFlags {
    let cols = rule.columns.clone().unwrap_or(0..fit.beta.len());
    let se = fit.se();
    let mut nonconvergence = !fit.converged || fit.diverged;
    let mut large_se = false;
    let mut extreme_or = fit.diverged;
    for j in cols {
        let (b, s) = (fit.beta[j], se[j]);
        if !b.is_finite() || !s.is_finite() {
            nonconvergence = true;
        }
        if s.is_finite() && s > rule.max_se {
            large_se = true;
        }
        let or = b.exp();
        if !or.is_finite() || or > rule.max_or {
            extreme_or = true;
        }
    }
    StabilityFlags {
        nonconvergence,
        large_se,
        extreme_or,
        is_stable: !(nonconvergence || large_se || extreme_or),
    }
}

struct Evaluation<T> {
    loglik: T,
    grad: Vec<T>,
    info: Matrix<T>,
}

/// Compact copy of the informative strata restricted to identifiable columns.
struct Workspace<T> {
    width: usize,
    rows: Vec<T>,
    /// (offset in rows, member count, case index)
    strata: Vec<(usize, usize, usize)>,
}

impl<T: Real> Workspace<T> {
    fn evaluate(&self, beta: &[T], with_info: bool) -> Evaluation<T> {
        let p = self.width;
        let mut loglik = T::zero();
        let mut grad = vec![T::zero(); p];
        let mut info = Matrix::zeros(p, p);
        let mut eta = Vec::new();
        let mut mean = vec![T::zero(); p];
        let mut centered = vec![T::zero(); p];
        for &(offset, m, case) in &self.strata {
            let row = |k: usize| &self.rows[(offset + k) * p..(offset + k + 1) * p];
            eta.clear();
            eta.extend((0..m).map(|k| row(k).iter().zip(beta).map(|(&x, &b)| x * b).sum::<T>()));
            let top = eta.iter().copied().fold(T::neg_infinity(), T::max);
            let weights: Vec<T> = eta.iter().map(|&e| (e - top).exp()).collect();
            let total: T = weights.iter().copied().sum();
            loglik += eta[case] - (top + total.ln());
            mean.iter_mut().for_each(|v| *v = T::zero());
            for (k, &w) in weights.iter().enumerate() {
                let pk = w / total;
                for (mv, &x) in mean.iter_mut().zip(row(k)) {
                    *mv += pk * x;
                }
            }
            for ((g, &x), &mv) in grad.iter_mut().zip(row(case)).zip(&mean) {
                *g += x - mv;
            }
            if with_info {
                for (k, &w) in weights.iter().enumerate() {
                    let pk = w / total;
                    for ((c, &x), &mv) in centered.iter_mut().zip(row(k)).zip(&mean) {
                        *c = x - mv;
                    }
                    for a in 0..p {
                        let pa = pk * centered[a];
                        if pa == T::zero() {
                            continue;
                        }
                        for b in 0..=a {
                            info[(a, b)] += pa * centered[b];
                        }
                    }
                }
            }
        }
        if with_info {
            info.symmetrize_from_lower();
        }
        Evaluation { loglik, grad, info }
    }
}

fn max_norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

/// Maximises the conditional likelihood over `strata`.
///
/// Strata whose member rows are all identical are dropped and counted.
/// Columns without within-stratum variation (or linearly dependent on
/// earlier columns within strata) are aliased: fixed at zero and given NaN
/// variance.
pub fn fit_clogit<T: Real>(strata: &[Stratum<T>], opts: &ClogitOptions<T>) -> Result<ClogitFit<T>, ClogitError> {
    let width = match strata.first() {
        Some(s) => s.width(),
        None => return Err(ClogitError::NoInformativeStrata),
    };
    if let Some(bad) = strata.iter().find(|s| s.width() != width) {
        return Err(ClogitError::DimensionMismatch {
            expected: width,
            found: bad.width(),
        });
    }
    let informative: Vec<&Stratum<T>> = strata.iter().filter(|s| !s.is_uninformative()).collect();
    let n_dropped = strata.len() - informative.len();
    if informative.is_empty() {
        return Err(ClogitError::NoInformativeStrata);
    }

    // within-stratum scatter about the first member; differences are exact,
    // so stratum-constant columns come out exactly zero
    let mut scatter = Matrix::zeros(width, width);
    for s in &informative {
        let first = s.member(0);
        for k in 1..s.len() {
            let d: Vec<T> = s.member(k).iter().zip(first).map(|(&x, &f)| x - f).collect();
            for a in 0..width {
                for b in 0..=a {
                    scatter[(a, b)] += d[a] * d[b];
                }
            }
        }
    }
    scatter.symmetrize_from_lower();
    let dependent = dependent_columns(&scatter, opts.rank_tol);
    let aliased: Vec<bool> = (0..width).map(|j| dependent.contains(&j)).collect();
    let active: Vec<usize> = (0..width).filter(|&j| !aliased[j]).collect();
    if active.is_empty() {
        return Err(ClogitError::NoInformativeStrata);
    }

    let p = active.len();
    let mut ws = Workspace {
        width: p,
        rows: Vec::new(),
        strata: Vec::with_capacity(informative.len()),
    };
    let mut offset = 0;
    for s in &informative {
        for k in 0..s.len() {
            let row = s.member(k);
            ws.rows.extend(active.iter().map(|&j| row[j]));
        }
        ws.strata.push((offset, s.len(), s.case_index()));
        offset += s.len();
    }

    let mut beta = vec![T::zero(); p];
    let mut eval = ws.evaluate(&beta, true);
    let mut converged = false;
    let mut diverged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if max_norm(&eval.grad) < opts.tol {
            converged = true;
            // one polishing step; Newton is quadratic here
            if let Some(chol) = Cholesky::new(&eval.info) {
                let step = chol.solve(&eval.grad);
                let trial: Vec<T> = beta.iter().zip(&step).map(|(&b, &s)| b + s).collect();
                let e = ws.evaluate(&trial, true);
                if e.loglik.is_finite() && e.loglik >= eval.loglik && max_norm(&e.grad) <= max_norm(&eval.grad) {
                    beta = trial;
                    eval = e;
                }
            }
            break;
        }
        iterations += 1;
        let Some(chol) = Cholesky::new(&eval.info) else {
            diverged = true;
            break;
        };
        let step = chol.solve(&eval.grad);
        // near the optimum the log-likelihood is flat to rounding
        let slack = T::lit(64.0) * T::epsilon() * (T::one() + eval.loglik.abs());
        let mut scale = T::one();
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<T> = beta.iter().zip(&step).map(|(&b, &s)| b + scale * s).collect();
            let e = ws.evaluate(&trial, false);
            if e.loglik.is_finite() && e.loglik >= eval.loglik - slack {
                accepted = Some(trial);
                break;
            }
            scale *= T::lit(0.5);
        }
        let Some(next) = accepted else {
            break;
        };
        beta = next;
        if beta.iter().any(|b| !b.is_finite() || b.abs() > opts.divergence_bound) {
            diverged = true;
            eval = ws.evaluate(&beta, true);
            break;
        }
        eval = ws.evaluate(&beta, true);
    }
    if !converged && !diverged && max_norm(&eval.grad) < opts.tol {
        converged = true;
    }

    let mut full_beta = vec![T::zero(); width];
    for (k, &j) in active.iter().enumerate() {
        full_beta[j] = beta[k];
    }
    let mut cov = Matrix::zeros(width, width);
    for a in 0..width {
        for b in 0..width {
            cov[(a, b)] = T::nan();
        }
    }
    if let Some(chol) = Cholesky::new(&eval.info) {
        let inv = chol.inverse();
        for (ka, &a) in active.iter().enumerate() {
            for (kb, &b) in active.iter().enumerate() {
                cov[(a, b)] = inv[(ka, kb)];
            }
        }
    }

    let mut fit = ClogitFit {
        beta: full_beta,
        cov,
        converged,
        diverged,
        iterations,
        loglik: eval.loglik,
        gradient_max_norm: max_norm(&eval.grad),
        aliased,
        n_strata: informative.len(),
        n_dropped_strata: n_dropped,
        stability: StabilityFlags::default(),
    };
    fit.stability = stability_check(&fit, &opts.stability);
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: usize, case: f64, control: f64) -> Stratum<f64> {
        Stratum::from_case_controls(format!("s{id}"), vec![case], vec![vec![control]]).unwrap()
    }

    fn discordant(n10: usize, n01: usize, concordant: usize) -> Vec<Stratum<f64>> {
        let mut v = Vec::new();
        for i in 0..n10 {
            v.push(pair(i, 1.0, 0.0));
        }
        for i in 0..n01 {
            v.push(pair(100 + i, 0.0, 1.0));
        }
        for i in 0..concordant {
            let x = (i % 2) as f64;
            v.push(pair(200 + i, x, x));
        }
        v
    }

    #[test]
    fn matched_pairs_closed_form() {
        let fit = fit_clogit(&discordant(6, 3, 5), &ClogitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.beta[0] - 2f64.ln()).abs() < 1e-10);
        assert_eq!(fit.n_dropped_strata, 5);
        assert_eq!(fit.n_strata, 9);
        // var = 1/n10 + 1/n01
        assert!((fit.cov[(0, 0)] - (1.0 / 6.0 + 1.0 / 3.0)).abs() < 1e-10);
    }

    #[test]
    fn constant_exposure_has_no_information() {
        let strata = vec![pair(0, 1.0, 1.0), pair(1, 0.0, 0.0)];
        assert_eq!(
            fit_clogit(&strata, &ClogitOptions::default()).unwrap_err(),
            ClogitError::NoInformativeStrata
        );
        assert_eq!(
            fit_clogit::<f64>(&[], &ClogitOptions::default()).unwrap_err(),
            ClogitError::NoInformativeStrata
        );
    }

    #[test]
    fn complete_separation_is_flagged_not_thrown() {
        let fit = fit_clogit(&[pair(0, 1.0, 0.0)], &ClogitOptions::default()).unwrap();
        assert!(fit.stability.extreme_or);
        assert!(!fit.stability.is_stable);
    }

    #[test]
    fn stratum_constant_column_is_aliased_and_harmless() {
        let base = discordant(7, 4, 2);
        let with_const: Vec<Stratum<f64>> = base
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let c = i as f64 * 0.37;
                let members = (0..s.len())
                    .map(|k| (vec![s.member(k)[0], c], k == s.case_index()))
                    .collect();
                Stratum::new(s.id.clone(), members).unwrap()
            })
            .collect();
        let a = fit_clogit(&base, &ClogitOptions::default()).unwrap();
        let b = fit_clogit(&with_const, &ClogitOptions::default()).unwrap();
        assert_eq!(b.aliased, vec![false, true]);
        assert!((a.beta[0] - b.beta[0]).abs() < 1e-10);
        assert_eq!(b.beta[1], 0.0);
        assert!(b.se()[1].is_nan());
        assert!(!b.stability.is_stable);
    }

    #[test]
    fn stratum_validation() {
        assert!(Stratum::new("a", vec![(vec![1.0], true), (vec![0.0], true)]).is_err());
        assert!(Stratum::new("a", vec![(vec![1.0], true)]).is_err());
        assert!(Stratum::new("a", vec![(vec![1.0], true), (vec![0.0, 1.0], false)]).is_err());
        let s1 = pair(0, 1.0, 0.0);
        let s2 = Stratum::from_case_controls("w", vec![1.0, 2.0], vec![vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            fit_clogit(&[s1, s2], &ClogitOptions::default()),
            Err(ClogitError::DimensionMismatch { .. })
        ));
    }

    fn fake_fit(beta: Vec<f64>, se: Vec<f64>, converged: bool) -> ClogitFit<f64> {
        let n = beta.len();
        let mut cov = Matrix::zeros(n, n);
        for (i, s) in se.iter().enumerate() {
            cov[(i, i)] = s * s;
        }
        ClogitFit {
            beta,
            cov,
            converged,
            diverged: false,
            iterations: 3,
            loglik: -1.0,
            gradient_max_norm: 0.0,
            aliased: vec![false; n],
            n_strata: 10,
            n_dropped_strata: 0,
            stability: StabilityFlags::default(),
        }
    }

    #[test]
    fn stability_thresholds() {
        let rule = StabilityRule::default();
        let f = stability_check(&fake_fit(vec![0.1, 0.2], vec![12.0, 0.3], true), &rule);
        assert!(f.large_se && !f.is_stable);
        assert_eq!(f.reason(), "large_se");
        let f = stability_check(&fake_fit(vec![150f64.ln(), 0.2], vec![0.3, 0.3], true), &rule);
        assert!(f.extreme_or && !f.large_se);
        let f = stability_check(&fake_fit(vec![10f64.ln(), -1.0], vec![0.5, 0.5], true), &rule);
        assert!(f.is_stable && f.reason().is_empty());
        let f = stability_check(&fake_fit(vec![0.1], vec![0.5], false), &rule);
        assert!(f.nonconvergence && !f.is_stable);
        // SE exactly at the threshold is not "greater than"
        let f = stability_check(&fake_fit(vec![0.1], vec![10.0], true), &rule);
        assert!(f.is_stable);
    }

    #[test]
    fn stability_rule_can_ignore_nuisance_columns() {
        let rule = StabilityRule {
            columns: Some(0..1),
            ..StabilityRule::default()
        };
        let f = stability_check(&fake_fit(vec![0.1, 8.0], vec![0.3, 40.0], true), &rule);
        assert!(f.is_stable);
    }
}
