//! Quasi-Poisson regression by iteratively reweighted least squares.
//!
//! Point estimates are the Poisson maximum-likelihood estimates under a log
//! link. The dispersion is the Pearson statistic over the residual degrees of
//! freedom and only rescales the covariance.

use serde::Serialize;
use thiserror::Error;

use crate::effect::EffectEstimate;
use crate::linalg::{dependent_columns, Cholesky, Matrix};
use crate::scalar::{two_sided_normal_p, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("response has {y} rows but the design has {x}")]
    DimensionMismatch { y: usize, x: usize },
    #[error("design has {names} column names for {cols} columns")]
    NameMismatch { names: usize, cols: usize },
    #[error("duplicate column name {0:?}")]
    DuplicateName(String),
    #[error("response has no nonzero count")]
    NoCounts,
    #[error("design contains non-finite entries")]
    NonFinite,
    #[error("design is rank deficient; dependent columns: {columns:?}")]
    Collinear { columns: Vec<String> },
    #[error("no covariate named {0:?} in the fit")]
    UnknownCovariate(String),
}

/// Named-column design matrix (rows are observations).
#[derive(Debug, Clone)]
pub struct DesignMatrix<T> {
    names: Vec<String>,
    x: Matrix<T>,
}

impl<T: Real> DesignMatrix<T> {
    pub fn new(names: Vec<String>, x: Matrix<T>) -> Result<Self, GlmError> {
        if names.len() != x.ncols() {
            return Err(GlmError::NameMismatch {
                names: names.len(),
                cols: x.ncols(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(GlmError::DuplicateName(n.clone()));
            }
        }
        Ok(Self { names, x })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.x
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    /// Copy with one additional column appended.
    pub fn with_column(&self, name: &str, values: &[T]) -> Result<Self, GlmError> {
        if values.len() != self.nrows() {
            return Err(GlmError::DimensionMismatch {
                y: values.len(),
                x: self.nrows(),
            });
        }
        let cols = self.ncols() + 1;
        let mut data = Vec::with_capacity(self.nrows() * cols);
        for i in 0..self.nrows() {
            data.extend_from_slice(self.x.row(i));
            data.push(values[i]);
        }
        let mut names = self.names.clone();
        names.push(name.to_string());
        Self::new(names, Matrix::from_row_major(self.nrows(), cols, data))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IrlsOptions<T> {
    /// Relative deviance change for convergence.
    pub tol: T,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Relative tolerance of the sequential rank check.
    pub rank_tol: T,
    pub dispersion_floor: T,
}

impl<T: Real> Default for IrlsOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-8),
            max_iter: 50,
            max_halvings: 20,
            rank_tol: T::lit(1e-10),
            dispersion_floor: T::lit(1e-12),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct QuasiPoissonFit<T = f64> {
    /// Names of the columns actually fitted (after pruning).
    pub names: Vec<String>,
    pub beta: Vec<T>,
    /// Dispersion-scaled covariance, `φ (XᵀWX)⁻¹`.
    pub cov: Matrix<T>,
    /// Unscaled Poisson covariance `(XᵀWX)⁻¹`.
    pub poisson_cov: Matrix<T>,
    pub dispersion_phi: T,
    /// True when φ was raised to the floor (zero residual df or φ ≈ 0).
    pub dispersion_floored: bool,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: T,
    pub df_resid: usize,
    /// All-zero columns dropped before fitting.
    pub pruned_columns: Vec<String>,
}

impl<T: Real> QuasiPoissonFit<T> {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Poisson (φ = 1) standard errors.
    pub fn poisson_se(&self) -> Vec<T> {
        (0..self.beta.len()).map(|i| self.poisson_cov[(i, i)].sqrt()).collect()
    }

    /// Quasi-Poisson standard errors, `√φ` times the Poisson ones.
    pub fn se(&self) -> Vec<T> {
        let s = self.dispersion_phi.sqrt();
        self.poisson_se().into_iter().map(|v| s * v).collect()
    }

    /// Poisson score `Xᵀ(y − μ)` at the returned coefficients.
    pub fn score(&self, y: &[u64], design: &DesignMatrix<T>) -> Vec<T> {
        let keep: Vec<usize> = self
            .names
            .iter()
            .map(|n| design.names().iter().position(|m| m == n).expect("fitted column present"))
            .collect();
        let x = design.matrix();
        let mut g = vec![T::zero(); keep.len()];
        for i in 0..x.nrows() {
            let row = x.row(i);
            let eta: T = keep.iter().zip(&self.beta).map(|(&j, &b)| row[j] * b).sum();
            let r = T::from_u64(y[i]).unwrap() - eta.exp();
            for (gk, &j) in g.iter_mut().zip(&keep) {
                *gk += row[j] * r;
            }
        }
        g
    }
}

/// Incidence rate ratio for one covariate with a two-sided Wald p-value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaldEffect<T = f64> {
    pub estimate: EffectEstimate<T>,
    pub z: T,
    pub p_value: T,
}

fn poisson_deviance<T: Real>(y: &[T], mu: &[T]) -> T {
    let two = T::lit(2.0);
    y.iter()
        .zip(mu)
        .map(|(&yi, &mi)| {
            let term = if yi > T::zero() { yi * (yi / mi).ln() } else { T::zero() };
            two * (term - (yi - mi))
        })
        .sum()
}

/// Fits a log-link Poisson GLM by IRLS and attaches the quasi-Poisson
/// dispersion. Non-convergence is reported through `converged`, not as an
/// error.
pub fn fit_quasipoisson<T: Real>(
    y: &[u64],
    design: &DesignMatrix<T>,
    opts: &IrlsOptions<T>,
) -> Result<QuasiPoissonFit<T>, GlmError> {
    let n = design.nrows();
    if y.len() != n {
        return Err(GlmError::DimensionMismatch { y: y.len(), x: n });
    }
    if y.iter().all(|&v| v == 0) {
        return Err(GlmError::NoCounts);
    }
    let x_full = design.matrix();
    if !x_full.is_finite() {
        return Err(GlmError::NonFinite);
    }

    let mut keep = Vec::new();
    let mut pruned = Vec::new();
    for j in 0..design.ncols() {
        if (0..n).any(|i| x_full[(i, j)] != T::zero()) {
            keep.push(j);
        } else {
            pruned.push(design.names()[j].clone());
        }
    }
    let p = keep.len();
    let rows: Vec<usize> = (0..n).collect();
    let x = x_full.select(&rows, &keep);
    let names: Vec<String> = keep.iter().map(|&j| design.names()[j].clone()).collect();

    // sparse row structure; calendar designs are mostly zeros
    let nz: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..p).filter(|&j| x[(i, j)] != T::zero()).collect())
        .collect();

    let gram = weighted_gram(&x, &nz, &vec![T::one(); n]);
    let dependent = dependent_columns(&gram, opts.rank_tol);
    if !dependent.is_empty() {
        return Err(GlmError::Collinear {
            columns: dependent.iter().map(|&j| names[j].clone()).collect(),
        });
    }

    let yf: Vec<T> = y.iter().map(|&v| T::from_u64(v).unwrap()).collect();
    let mut mu: Vec<T> = yf.iter().map(|&v| v + T::lit(0.1)).collect();
    let mut eta: Vec<T> = mu.iter().map(|m| m.ln()).collect();
    let mut dev = poisson_deviance(&yf, &mu);
    let mut beta: Option<Vec<T>> = None;
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=opts.max_iter {
        iterations = it;
        let w = mu.clone();
        let z: Vec<T> = (0..n).map(|i| eta[i] + (yf[i] - mu[i]) / mu[i]).collect();
        let a = weighted_gram(&x, &nz, &w);
        let mut b = vec![T::zero(); p];
        for i in 0..n {
            let wz = w[i] * z[i];
            for &j in &nz[i] {
                b[j] += x[(i, j)] * wz;
            }
        }
        let chol = Cholesky::new(&a).ok_or_else(|| GlmError::Collinear {
            columns: names.clone(),
        })?;
        let mut candidate = chol.solve(&b);
        let mut cand_eta = x.mul_vec(&candidate);
        let mut cand_mu: Vec<T> = cand_eta.iter().map(|e| e.exp()).collect();
        let mut cand_dev = poisson_deviance(&yf, &cand_mu);
        if let Some(prev) = &beta {
            let mut halvings = 0;
            while (!cand_dev.is_finite() || cand_dev > dev) && halvings < opts.max_halvings {
                let half = T::lit(0.5);
                candidate = candidate
                    .iter()
                    .zip(prev)
                    .map(|(&c, &o)| o + half * (c - o))
                    .collect();
                cand_eta = x.mul_vec(&candidate);
                cand_mu = cand_eta.iter().map(|e| e.exp()).collect();
                cand_dev = poisson_deviance(&yf, &cand_mu);
                halvings += 1;
            }
        }
        if !cand_dev.is_finite() {
            break;
        }
        let change = (cand_dev - dev).abs() / (cand_dev.abs() + T::lit(0.1));
        beta = Some(candidate);
        eta = cand_eta;
        mu = cand_mu;
        dev = cand_dev;
        if it > 1 && change < opts.tol {
            converged = true;
            break;
        }
    }
    let beta = beta.ok_or(GlmError::NonFinite)?;

    let pearson: T = yf
        .iter()
        .zip(&mu)
        .map(|(&yi, &mi)| (yi - mi) * (yi - mi) / mi)
        .sum();
    let df_resid = n.saturating_sub(p);
    let mut phi = if df_resid > 0 {
        pearson / T::from_usize_lossy(df_resid)
    } else {
        T::zero()
    };
    let mut floored = false;
    if df_resid == 0 || phi < opts.dispersion_floor {
        phi = opts.dispersion_floor;
        floored = true;
    }

    let info = weighted_gram(&x, &nz, &mu);
    let poisson_cov = Cholesky::new(&info)
        .ok_or_else(|| GlmError::Collinear { columns: names.clone() })?
        .inverse();
    let cov = poisson_cov.scale(phi);

    Ok(QuasiPoissonFit {
        names,
        beta,
        cov,
        poisson_cov,
        dispersion_phi: phi,
        dispersion_floored: floored,
        converged,
        iterations,
        deviance: dev,
        df_resid,
        pruned_columns: pruned,
    })
}

fn weighted_gram<T: Real>(x: &Matrix<T>, nz: &[Vec<usize>], w: &[T]) -> Matrix<T> {
    let p = x.ncols();
    let mut a = Matrix::zeros(p, p);
    for (i, cols) in nz.iter().enumerate() {
        let row = x.row(i);
        let wi = w[i];
        for (ai, &j) in cols.iter().enumerate() {
            let wx = wi * row[j];
            for &k in &cols[..=ai] {
                a[(j, k)] += wx * row[k];
            }
        }
    }
    a.symmetrize_from_lower();
    a
}

/// IRR `exp(β)` for a named covariate, its 95% interval, and the two-sided
/// Wald p-value using the quasi-Poisson standard error.
pub fn irr_and_pvalue<T: Real>(fit: &QuasiPoissonFit<T>, covariate: &str) -> Result<WaldEffect<T>, GlmError> {
    let idx = fit
        .index_of(covariate)
        .ok_or_else(|| GlmError::UnknownCovariate(covariate.to_string()))?;
    let se = fit.se()[idx];
    Ok(wald_effect(covariate, fit.beta[idx], se))
}

pub fn wald_effect<T: Real>(name: &str, beta: T, se: T) -> WaldEffect<T> {
    let z = if beta == T::zero() { T::zero() } else { beta / se };
    WaldEffect {
        estimate: EffectEstimate::from_log(name, beta, se),
        z,
        p_value: two_sided_normal_p(z),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept_only(n: usize) -> DesignMatrix<f64> {
        DesignMatrix::new(vec!["(intercept)".into()], Matrix::from_row_major(n, 1, vec![1.0; n])).unwrap()
    }

    #[test]
    fn intercept_only_is_log_mean() {
        let fit = fit_quasipoisson(&[1, 2, 3], &intercept_only(3), &IrlsOptions::default()).unwrap();
        assert!((fit.beta[0] - 2f64.ln()).abs() < 1e-10);
        assert!(fit.converged);
        assert!((fit.dispersion_phi - 0.5).abs() < 1e-10);
        assert_eq!(fit.df_resid, 2);
    }

    #[test]
    fn all_zero_counts_rejected() {
        let err = fit_quasipoisson(&[0, 0, 0], &intercept_only(3), &IrlsOptions::default()).unwrap_err();
        assert_eq!(err, GlmError::NoCounts);
    }

    #[test]
    fn length_mismatch_rejected() {
        let err = fit_quasipoisson(&[1, 2], &intercept_only(3), &IrlsOptions::default()).unwrap_err();
        assert!(matches!(err, GlmError::DimensionMismatch { .. }));
    }

    #[test]
    fn zero_column_is_pruned_not_fatal() {
        let d = intercept_only(4).with_column("holiday", &[0.0; 4]).unwrap();
        let fit = fit_quasipoisson(&[1, 2, 3, 4], &d, &IrlsOptions::default()).unwrap();
        assert_eq!(fit.pruned_columns, vec!["holiday".to_string()]);
        assert_eq!(fit.names, vec!["(intercept)".to_string()]);
    }

    #[test]
    fn scaled_duplicate_column_is_collinear() {
        let t = [20.0, 25.0, 30.0, 22.0, 31.0];
        let d = intercept_only(5)
            .with_column("tmax", &t)
            .unwrap()
            .with_column("tmax_x3", &t.map(|v| 3.0 * v))
            .unwrap();
        let err = fit_quasipoisson(&[1, 2, 3, 1, 5], &d, &IrlsOptions::default()).unwrap_err();
        assert_eq!(
            err,
            GlmError::Collinear {
                columns: vec!["tmax_x3".into()]
            }
        );
    }

    #[test]
    fn saturated_fit_floors_dispersion() {
        let fit = fit_quasipoisson(&[3], &intercept_only(1), &IrlsOptions::default()).unwrap();
        assert!(fit.dispersion_floored);
        assert_eq!(fit.dispersion_phi, 1e-12);
    }

    #[test]
    fn wald_reference_values() {
        let w = wald_effect("tmax", 0.0f64, 0.3);
        assert_eq!(w.estimate.point, 1.0);
        assert_eq!(w.p_value, 1.0);
        let w = wald_effect("tmax", 0.01f64, 0.005);
        assert!((w.estimate.point - 1.010_050_167).abs() < 1e-9);
        assert!((w.p_value - 0.045_500_263_9).abs() < 1e-9);
    }

    #[test]
    fn table_row_interval_reproduced() {
        // IRR 1.33 with 95% interval (1.25, 1.42)
        let beta = 1.33f64.ln();
        let se = (1.42f64.ln() - 1.25f64.ln()) / (2.0 * 1.96);
        let w = wald_effect("tmax", beta, se);
        assert!((w.estimate.ci_low - 1.25).abs() < 0.01);
        assert!((w.estimate.ci_high - 1.42).abs() < 0.01);
    }

    #[test]
    fn unknown_covariate() {
        let fit = fit_quasipoisson(&[1, 2, 3], &intercept_only(3), &IrlsOptions::default()).unwrap();
        assert!(matches!(
            irr_and_pvalue(&fit, "tmax"),
            Err(GlmError::UnknownCovariate(_))
        ));
    }
}
