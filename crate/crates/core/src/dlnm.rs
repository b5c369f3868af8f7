//! Distributed-lag non-linear cross-basis and centred odds-ratio prediction.
//!
//! A cross-basis row for a lag history `t_0..t_L` is
//! `Σ_l kron(e(t_l), c(l))`, where `e` is the exposure basis and `c` the lag
//! basis evaluated at integer lag `l`. The exposure basis enters without its
//! first B-spline column: the full basis sums to one, and that constant would
//! be indistinguishable from the stratum intercept the conditional likelihood
//! already removes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::effect::EffectEstimate;
use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::splinebasis::{log_lag_knots, BasisKind, BasisSpec, SplineBasis, SplineError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DlnmError {
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("lag history has {found} values, expected {expected}")]
    LagLength { expected: usize, found: usize },
    #[error("non-finite exposure in lag history")]
    NonFinite,
    #[error("coefficient dimension mismatch: cross-basis has {basis} columns, beta {beta}, cov {cov_rows}x{cov_cols}")]
    DimensionMismatch {
        basis: usize,
        beta: usize,
        cov_rows: usize,
        cov_cols: usize,
    },
    #[error("contrast {0} exceeds the lag window")]
    ContrastOutOfRange(String),
    #[error("unrecognised contrast name {0:?}")]
    UnknownContrast(String),
    #[error("invalid cross-basis: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossBasisSpec<T> {
    pub exposure: BasisSpec<T>,
    /// `None` only for `max_lag = 0`, where the lag basis is the scalar 1.
    pub lag: Option<BasisSpec<T>>,
    pub max_lag: usize,
}

impl<T: Real> CrossBasisSpec<T> {
    /// B-spline exposure basis of `degree` with the given internal knots and
    /// boundaries, and a natural-spline lag basis over `[0, max_lag]` with
    /// `lag_knots` log-spaced internal knots.
    pub fn new(
        degree: usize,
        exposure_knots: Vec<T>,
        boundary: (T, T),
        max_lag: usize,
        lag_knots: usize,
    ) -> Result<Self, DlnmError> {
        let exposure = BasisSpec::bspline(degree, exposure_knots, boundary.0, boundary.1)?;
        let lag = if max_lag == 0 {
            None
        } else {
            let knots = log_lag_knots(max_lag, lag_knots);
            Some(BasisSpec::natural_cubic(knots, T::zero(), T::from_usize_lossy(max_lag))?)
        };
        let spec = Self { exposure, lag, max_lag };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DlnmError> {
        if !matches!(self.exposure.kind, BasisKind::BSpline { .. }) {
            return Err(DlnmError::InvalidSpec("exposure basis must be a B-spline".into()));
        }
        if self.exposure.ncols() < 2 {
            return Err(DlnmError::InvalidSpec(
                "exposure basis needs at least two functions".into(),
            ));
        }
        match (&self.lag, self.max_lag) {
            (None, 0) => Ok(()),
            (None, _) => Err(DlnmError::InvalidSpec("lag basis required when max_lag > 0".into())),
            (Some(l), m) => {
                l.validate()?;
                if m == 0 {
                    return Err(DlnmError::InvalidSpec("max_lag = 0 takes no lag basis".into()));
                }
                Ok(())
            }
        }
    }
}

/// Exposure on the index day and each preceding day, lag 0 first.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedExposure<T>(Vec<T>);

impl<T: Real> LaggedExposure<T> {
    pub fn new(temps: Vec<T>) -> Result<Self, DlnmError> {
        if temps.iter().any(|t| !t.is_finite()) {
            return Err(DlnmError::NonFinite);
        }
        Ok(Self(temps))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn max_lag(&self) -> usize {
        self.0.len().saturating_sub(1)
    }
}

/// A compiled cross-basis: exposure evaluator plus the lag basis tabulated
/// at lags `0..=max_lag`.
#[derive(Debug, Clone)]
pub struct CrossBasis<T> {
    spec: CrossBasisSpec<T>,
    exposure: SplineBasis<T>,
    /// (max_lag + 1) × lag columns
    lag_table: Matrix<T>,
}

impl<T: Real> CrossBasis<T> {
    pub fn new(spec: CrossBasisSpec<T>) -> Result<Self, DlnmError> {
        spec.validate()?;
        let exposure = SplineBasis::new(spec.exposure.clone())?;
        let lag_table = match &spec.lag {
            None => Matrix::from_row_major(1, 1, vec![T::one()]),
            Some(l) => {
                let lags: Vec<T> = (0..=spec.max_lag).map(T::from_usize_lossy).collect();
                SplineBasis::new(l.clone())?.eval(&lags)?
            }
        };
        Ok(Self {
            spec,
            exposure,
            lag_table,
        })
    }

    pub fn spec(&self) -> &CrossBasisSpec<T> {
        &self.spec
    }

    pub fn max_lag(&self) -> usize {
        self.spec.max_lag
    }

    pub fn n_exposure_cols(&self) -> usize {
        self.exposure.ncols() - 1
    }

    pub fn n_lag_cols(&self) -> usize {
        self.lag_table.ncols()
    }

    pub fn ncols(&self) -> usize {
        self.n_exposure_cols() * self.n_lag_cols()
    }

    /// Lag basis evaluated at integer lag `l`.
    pub fn lag_row(&self, l: usize) -> &[T] {
        self.lag_table.row(l)
    }

    /// Exposure basis row as it enters the cross-basis (first column dropped).
    pub fn exposure_row(&self, t: T) -> Result<Vec<T>, DlnmError> {
        let mut full = vec![T::zero(); self.exposure.ncols()];
        self.exposure.eval_into(t, &mut full)?;
        full.remove(0);
        Ok(full)
    }

    /// `kron(exposure_row(t), lag_row(l))`.
    pub fn term(&self, t: T, l: usize) -> Result<Vec<T>, DlnmError> {
        let e = self.exposure_row(t)?;
        Ok(kron(&e, self.lag_row(l)))
    }

    pub fn row_into(&self, temps: &[T], out: &mut [T]) -> Result<(), DlnmError> {
        let expected = self.spec.max_lag + 1;
        if temps.len() != expected {
            return Err(DlnmError::LagLength {
                expected,
                found: temps.len(),
            });
        }
        assert_eq!(out.len(), self.ncols());
        out.iter_mut().for_each(|v| *v = T::zero());
        let nl = self.n_lag_cols();
        let mut full = vec![T::zero(); self.exposure.ncols()];
        for (l, &t) in temps.iter().enumerate() {
            if !t.is_finite() {
                return Err(DlnmError::NonFinite);
            }
            self.exposure.eval_into(t, &mut full)?;
            let lag = self.lag_row(l);
            for (i, &e) in full[1..].iter().enumerate() {
                if e == T::zero() {
                    continue;
                }
                for (j, &c) in lag.iter().enumerate() {
                    out[i * nl + j] += e * c;
                }
            }
        }
        Ok(())
    }

    pub fn row(&self, lagged: &LaggedExposure<T>) -> Result<Vec<T>, DlnmError> {
        let mut out = vec![T::zero(); self.ncols()];
        self.row_into(lagged.as_slice(), &mut out)?;
        Ok(out)
    }
}

fn kron<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().flat_map(|&x| b.iter().map(move |&y| x * y)).collect()
}

pub fn crossbasis_row<T: Real>(spec: &CrossBasisSpec<T>, lagged: &LaggedExposure<T>) -> Result<Vec<T>, DlnmError> {
    CrossBasis::new(spec.clone())?.row(lagged)
}

/// A named linear contrast over the lag window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Contrast {
    /// Effect at a single lag.
    Lag(usize),
    /// Effect summed over lags `0..=h`.
    Cumulative(usize),
}

impl Contrast {
    pub fn horizon(&self) -> usize {
        match *self {
            Contrast::Lag(l) | Contrast::Cumulative(l) => l,
        }
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Contrast::Lag(l) => write!(f, "lag{l}"),
            Contrast::Cumulative(h) => write!(f, "cum0-{h}"),
        }
    }
}

impl FromStr for Contrast {
    type Err = DlnmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DlnmError::UnknownContrast(s.to_string());
        if let Some(rest) = s.strip_prefix("cum0-") {
            return rest.parse().map(Contrast::Cumulative).map_err(|_| bad());
        }
        if let Some(rest) = s.strip_prefix("lag") {
            return rest.parse().map(Contrast::Lag).map_err(|_| bad());
        }
        Err(bad())
    }
}

/// Every single-lag contrast followed by cumulative windows `0-1 .. 0-max_lag`.
pub fn standard_contrasts(max_lag: usize) -> Vec<Contrast> {
    (0..=max_lag)
        .map(Contrast::Lag)
        .chain((1..=max_lag).map(Contrast::Cumulative))
        .collect()
}

/// Odds ratios at `target` versus `reference` exposure for each contrast.
///
/// `beta` and `cov` may carry extra trailing coefficients (e.g. a holiday
/// term); only the leading cross-basis block is used.
pub fn predict_or<T: Real>(
    basis: &CrossBasis<T>,
    beta: &[T],
    cov: &Matrix<T>,
    target: T,
    reference: T,
    contrasts: &[Contrast],
) -> Result<Vec<EffectEstimate<T>>, DlnmError> {
    let k = basis.ncols();
    if beta.len() < k || cov.nrows() != beta.len() || cov.ncols() != beta.len() {
        return Err(DlnmError::DimensionMismatch {
            basis: k,
            beta: beta.len(),
            cov_rows: cov.nrows(),
            cov_cols: cov.ncols(),
        });
    }
    let e_target = basis.exposure_row(target)?;
    let e_ref = basis.exposure_row(reference)?;
    let e_diff: Vec<T> = e_target.iter().zip(&e_ref).map(|(&a, &b)| a - b).collect();
    let idx: Vec<usize> = (0..k).collect();
    let cov_cb = cov.select(&idx, &idx);

    contrasts
        .iter()
        .map(|c| {
            if c.horizon() > basis.max_lag() {
                return Err(DlnmError::ContrastOutOfRange(c.to_string()));
            }
            let lag_weights: Vec<T> = match *c {
                Contrast::Lag(l) => basis.lag_row(l).to_vec(),
                Contrast::Cumulative(h) => {
                    let mut acc = vec![T::zero(); basis.n_lag_cols()];
                    for l in 0..=h {
                        for (a, &v) in acc.iter_mut().zip(basis.lag_row(l)) {
                            *a += v;
                        }
                    }
                    acc
                }
            };
            let d = kron(&e_diff, &lag_weights);
            let log_or: T = d.iter().zip(beta).map(|(&x, &b)| x * b).sum();
            let var = cov_cb.quad_form(&d);
            let se = if var > T::zero() { var.sqrt() } else { var.max(T::zero()) };
            Ok(EffectEstimate::from_log(c.to_string(), log_or, se))
        })
        .collect()
}

/// Codes whose lag-0 interval lies strictly above one.
pub fn significance_filter<T: Real>(estimates: &[(String, Vec<EffectEstimate<T>>)]) -> Vec<String> {
    estimates
        .iter()
        .filter(|(_, est)| {
            est.iter()
                .find(|e| e.contrast_name == "lag0")
                .is_some_and(|e| e.excludes_one_from_above())
        })
        .map(|(code, _)| code.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn primary_basis() -> CrossBasis<f64> {
        let spec = CrossBasisSpec::new(2, vec![27.59], (15.0, 40.0), 3, 1).unwrap();
        CrossBasis::new(spec).unwrap()
    }

    #[test]
    fn dimensions() {
        let cb = primary_basis();
        assert_eq!((cb.n_exposure_cols(), cb.n_lag_cols(), cb.ncols()), (3, 3, 9));
        let spec = CrossBasisSpec::new(3, vec![27.59], (15.0, 40.0), 5, 2).unwrap();
        assert_eq!(CrossBasis::new(spec).unwrap().ncols(), 16);
    }

    #[test]
    fn constant_history_factorises() {
        let cb = primary_basis();
        let t = 31.2;
        let row = cb.row(&LaggedExposure::new(vec![t; 4]).unwrap()).unwrap();
        let e = cb.exposure_row(t).unwrap();
        let mut lag_sum = vec![0.0; 3];
        for l in 0..4 {
            for (a, v) in lag_sum.iter_mut().zip(cb.lag_row(l)) {
                *a += v;
            }
        }
        let expect = kron(&e, &lag_sum);
        for (a, b) in row.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn no_lag_reduces_to_exposure_basis() {
        let spec = CrossBasisSpec::new(2, vec![0.5], (0.0, 1.0), 0, 0).unwrap();
        let cb = CrossBasis::new(spec).unwrap();
        let row = cb.row(&LaggedExposure::new(vec![0.3]).unwrap()).unwrap();
        assert_eq!(row, cb.exposure_row(0.3).unwrap());
    }

    #[test]
    fn wrong_history_length() {
        let cb = primary_basis();
        assert!(matches!(
            cb.row(&LaggedExposure::new(vec![30.0; 3]).unwrap()),
            Err(DlnmError::LagLength { expected: 4, found: 3 })
        ));
        assert!(LaggedExposure::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn reference_centring_is_exact() {
        let cb = primary_basis();
        let beta: Vec<f64> = (0..10).map(|i| 0.3 * i as f64 - 1.0).collect();
        let mut cov = Matrix::identity(10);
        cov[(0, 1)] = 0.2;
        cov[(1, 0)] = 0.2;
        let est = predict_or(&cb, &beta, &cov, 30.0, 30.0, &standard_contrasts(3)).unwrap();
        assert_eq!(est.len(), 7);
        for e in est {
            assert_eq!((e.point, e.ci_low, e.ci_high), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn null_coefficients_give_unit_or() {
        let cb = primary_basis();
        let est = predict_or(&cb, &[0.0; 9], &Matrix::identity(9), 33.67, 27.59, &[Contrast::Lag(0)]).unwrap();
        assert_eq!(est[0].point, 1.0);
        assert!(est[0].ci_low < 1.0 && est[0].ci_high > 1.0);
    }

    #[test]
    fn dimension_and_range_errors() {
        let cb = primary_basis();
        assert!(matches!(
            predict_or(&cb, &[0.0; 5], &Matrix::identity(5), 33.0, 27.0, &[Contrast::Lag(0)]),
            Err(DlnmError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            predict_or(&cb, &[0.0; 9], &Matrix::identity(9), 33.0, 27.0, &[Contrast::Cumulative(5)]),
            Err(DlnmError::ContrastOutOfRange(_))
        ));
    }

    #[test]
    fn contrast_names_roundtrip() {
        for c in standard_contrasts(5) {
            assert_eq!(c.to_string().parse::<Contrast>().unwrap(), c);
        }
        assert_eq!(Contrast::Cumulative(3).to_string(), "cum0-3");
        assert!("lagx".parse::<Contrast>().is_err());
    }

    fn lag0(low: f64, high: f64) -> Vec<EffectEstimate<f64>> {
        vec![EffectEstimate {
            contrast_name: "lag0".into(),
            point: (low * high).sqrt(),
            ci_low: low,
            ci_high: high,
            log_se: 0.1,
        }]
    }

    #[test]
    fn significance_is_strict_on_lower_bound() {
        let rows = vec![
            ("E86".to_string(), lag0(1.07, 1.18)),
            ("R60".to_string(), lag0(0.99, 1.26)),
            ("I95".to_string(), lag0(1.0, 1.10)),
            ("S96".to_string(), lag0(1.004, 1.10)),
        ];
        // 1.004 prints as 1.00 but is above one unrounded
        assert_eq!(significance_filter(&rows), vec!["E86".to_string(), "S96".to_string()]);
    }
}
