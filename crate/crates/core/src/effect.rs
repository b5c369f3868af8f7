use serde::Serialize;

use crate::scalar::{Real, Z95};

/// A ratio estimate (odds ratio or incidence rate ratio) with its 95%
/// Wald interval, built on the log scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectEstimate<T = f64> {
    pub contrast_name: String,
    pub point: T,
    pub ci_low: T,
    pub ci_high: T,
    /// Standard error of the log ratio.
    pub log_se: T,
}

impl<T: Real> EffectEstimate<T> {
    pub fn from_log(contrast_name: impl Into<String>, log_point: T, log_se: T) -> Self {
        let half = T::lit(Z95) * log_se;
        Self {
            contrast_name: contrast_name.into(),
            point: log_point.exp(),
            ci_low: (log_point - half).exp(),
            ci_high: (log_point + half).exp(),
            log_se,
        }
    }

    pub fn log_point(&self) -> T {
        self.point.ln()
    }

    /// Lower interval bound strictly above one, on unrounded values.
    pub fn excludes_one_from_above(&self) -> bool {
        self.ci_low > T::one()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_effect_has_unit_interval_with_zero_se() {
        let e = EffectEstimate::from_log("lag0", 0.0f64, 0.0);
        assert_eq!((e.point, e.ci_low, e.ci_high), (1.0, 1.0, 1.0));
        assert!(!e.excludes_one_from_above());
    }

    #[test]
    fn log_symmetric_interval() {
        let e = EffectEstimate::from_log("x", 0.3f64, 0.1);
        let up = e.ci_high.ln() - e.point.ln();
        let down = e.point.ln() - e.ci_low.ln();
        assert!((up - down).abs() < 1e-12);
        assert!(e.excludes_one_from_above());
    }
}
