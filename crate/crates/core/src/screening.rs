//! Stage 1: per-code daily count series, quasi-Poisson temperature slopes,
//! Benjamini–Hochberg adjustment and the retention rules.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::exposure::{ExposureError, ExposureSeries};
use crate::glmfit::{fit_quasipoisson, irr_and_pvalue, DesignMatrix, GlmError, IrlsOptions};
use crate::ingest::{calendar_features, DayOfWeek, DiagnosisCategory, VisitRecord};
use crate::linalg::Matrix;

#[derive(Debug, thiserror::Error)]
pub enum ScreeningError {
    #[error(transparent)]
    Exposure(#[from] ExposureError),
    #[error("stage 1 design: {0}")]
    Design(#[from] GlmError),
}

/// Every in-season day of the study years, in date order, with a reverse index.
#[derive(Debug, Clone)]
pub struct SeasonCalendar {
    days: Vec<NaiveDate>,
    index: HashMap<NaiveDate, usize>,
}

impl SeasonCalendar {
    pub fn new(season_months: &BTreeSet<u32>, years: (i32, i32)) -> Self {
        let mut days = Vec::new();
        for y in years.0..=years.1 {
            for &m in season_months {
                let Some(mut d) = NaiveDate::from_ymd_opt(y, m, 1) else {
                    continue;
                };
                while d.month() == m {
                    days.push(d);
                    d = d.succ_opt().expect("date in range");
                }
            }
        }
        let index = days.iter().enumerate().map(|(i, &d)| (d, i)).collect();
        Self { days, index }
    }

    pub fn days(&self) -> &[NaiveDate] {
        &self.days
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn position(&self, date: NaiveDate) -> Option<usize> {
        self.index.get(&date).copied()
    }
}

/// Zero-filled daily visit counts for one code.
pub fn daily_counts(visits: &[VisitRecord], code: &DiagnosisCategory, calendar: &SeasonCalendar) -> Vec<u64> {
    let mut y = vec![0u64; calendar.len()];
    for v in visits.iter().filter(|v| v.codes.contains(code)) {
        if let Some(i) = calendar.position(v.date) {
            y[i] += 1;
        }
    }
    y
}

/// Daily counts for every code seen in season, keyed and ordered by code.
pub fn all_daily_counts(visits: &[VisitRecord], calendar: &SeasonCalendar) -> BTreeMap<DiagnosisCategory, Vec<u64>> {
    let mut out: BTreeMap<DiagnosisCategory, Vec<u64>> = BTreeMap::new();
    for v in visits {
        let Some(i) = calendar.position(v.date) else {
            continue;
        };
        for c in &v.codes {
            out.entry(c.clone()).or_insert_with(|| vec![0; calendar.len()])[i] += 1;
        }
    }
    out
}

/// Benjamini–Hochberg step-up adjustment; output in input order. NaN inputs
/// stay NaN and are not counted in the family.
pub fn bh_adjust(pvalues: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..pvalues.len()).filter(|&i| !pvalues[i].is_nan()).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]).then(a.cmp(&b)));
    let m = order.len() as f64;
    let mut out = vec![f64::NAN; pvalues.len()];
    let mut running = f64::INFINITY;
    for (rank, &i) in order.iter().enumerate().rev() {
        let v = (pvalues[i] * m / (rank + 1) as f64).min(1.0);
        running = running.min(v);
        out[i] = running;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreeningCriteria {
    pub alpha: f64,
    pub min_count: u64,
    pub min_rel_freq: f64,
    pub use_slope: bool,
    pub use_freq: bool,
    pub use_count: bool,
    /// Treat year as a continuous trend instead of a factor.
    pub continuous_year: bool,
}

impl Default for ScreeningCriteria {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            min_count: 100,
            min_rel_freq: 0.30,
            use_slope: true,
            use_freq: true,
            use_count: true,
            continuous_year: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreeningRow {
    pub code: DiagnosisCategory,
    pub irr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub beta: f64,
    pub raw_p: f64,
    pub adj_p: f64,
    pub total_count: u64,
    pub rel_freq_above_p70: f64,
    pub dispersion_phi: f64,
    pub converged: bool,
    pub crit_slope: bool,
    pub crit_freq: bool,
    pub crit_count: bool,
    pub retained: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreeningResult {
    /// Sorted by adjusted p (NaN last), then code.
    pub rows: Vec<ScreeningRow>,
    pub family_size: usize,
    pub n_days: usize,
}

impl ScreeningResult {
    pub fn retained_codes(&self) -> Vec<DiagnosisCategory> {
        let mut v: Vec<_> = self.rows.iter().filter(|r| r.retained).map(|r| r.code.clone()).collect();
        v.sort();
        v
    }
}

/// Calendar design shared by every code: intercept, tmax, year, month and
/// weekday factors (first level dropped) and a holiday indicator.
pub fn stage1_design(
    calendar: &SeasonCalendar,
    tmax: &[f64],
    holidays: &HashSet<NaiveDate>,
    continuous_year: bool,
) -> Result<DesignMatrix<f64>, GlmError> {
    let feats: Vec<_> = calendar.days().iter().map(|&d| calendar_features(d, holidays)).collect();
    let years: BTreeSet<i32> = feats.iter().map(|f| f.year).collect();
    let months: BTreeSet<u32> = feats.iter().map(|f| f.month).collect();
    let dows: BTreeSet<DayOfWeek> = feats.iter().map(|f| f.day_of_week).collect();

    let mut names = vec!["(intercept)".to_string(), "tmax".to_string()];
    if continuous_year {
        names.push("year".into());
    } else {
        names.extend(years.iter().skip(1).map(|y| format!("year{y}")));
    }
    names.extend(months.iter().skip(1).map(|m| format!("month{m}")));
    names.extend(dows.iter().skip(1).map(|d| format!("dow{d:?}")));
    names.push("holiday".into());

    let p = names.len();
    let y0 = *years.first().unwrap_or(&0);
    let mut data = Vec::with_capacity(calendar.len() * p);
    for (f, &t) in feats.iter().zip(tmax) {
        data.push(1.0);
        data.push(t);
        if continuous_year {
            data.push((f.year - y0) as f64);
        } else {
            data.extend(years.iter().skip(1).map(|&y| f64::from(u8::from(f.year == y))));
        }
        data.extend(months.iter().skip(1).map(|&m| f64::from(u8::from(f.month == m))));
        data.extend(dows.iter().skip(1).map(|&d| f64::from(u8::from(f.day_of_week == d))));
        data.push(f64::from(u8::from(f.is_holiday)));
    }
    DesignMatrix::new(names, Matrix::from_row_major(calendar.len(), p, data))
}

/// Citywide temperature on every calendar day; any gap is an error.
pub fn citywide_on_calendar(exposure: &ExposureSeries, calendar: &SeasonCalendar) -> Result<Vec<f64>, ExposureError> {
    calendar.days().iter().map(|&d| exposure.citywide_value(d)).collect()
}

/// Stage-1 screen over every code with at least one in-season visit.
pub fn screen(
    visits: &[VisitRecord],
    exposure: &ExposureSeries,
    p70: f64,
    calendar: &SeasonCalendar,
    holidays: &HashSet<NaiveDate>,
    criteria: &ScreeningCriteria,
) -> Result<ScreeningResult, ScreeningError> {
    let tmax = citywide_on_calendar(exposure, calendar)?;
    let hot: Vec<bool> = tmax.iter().map(|&t| t > p70).collect();
    let counts = all_daily_counts(visits, calendar);
    let design = stage1_design(calendar, &tmax, holidays, criteria.continuous_year)?;
    let opts = IrlsOptions::default();

    let codes: Vec<(&DiagnosisCategory, &Vec<u64>)> = counts.iter().collect();
    let mut rows: Vec<ScreeningRow> = codes
        .par_iter()
        .map(|&(code, y)| {
            let total: u64 = y.iter().sum();
            let on_hot: u64 = y.iter().zip(&hot).filter(|(_, &h)| h).map(|(&c, _)| c).sum();
            let rel = if total == 0 { 0.0 } else { on_hot as f64 / total as f64 };
            let fit = fit_quasipoisson(y, &design, &opts)
                .and_then(|f| irr_and_pvalue(&f, "tmax").map(|w| (f, w)));
            let mut row = ScreeningRow {
                code: code.clone(),
                irr: f64::NAN,
                ci_low: f64::NAN,
                ci_high: f64::NAN,
                beta: f64::NAN,
                raw_p: f64::NAN,
                adj_p: f64::NAN,
                total_count: total,
                rel_freq_above_p70: rel,
                dispersion_phi: f64::NAN,
                converged: false,
                crit_slope: false,
                crit_freq: rel >= criteria.min_rel_freq,
                crit_count: total >= criteria.min_count,
                retained: false,
                error: None,
            };
            match fit {
                Ok((f, w)) => {
                    row.irr = w.estimate.point;
                    row.ci_low = w.estimate.ci_low;
                    row.ci_high = w.estimate.ci_high;
                    row.beta = w.estimate.log_point();
                    row.raw_p = w.p_value;
                    row.dispersion_phi = f.dispersion_phi;
                    row.converged = f.converged;
                    if !f.converged {
                        log::warn!("stage 1 fit for {code} did not converge");
                    }
                }
                Err(e) => {
                    log::warn!("stage 1 fit for {code} failed: {e}");
                    row.error = Some(e.to_string());
                }
            }
            row
        })
        .collect();

    let raw: Vec<f64> = rows.iter().map(|r| r.raw_p).collect();
    let adj = bh_adjust(&raw);
    let family_size = raw.iter().filter(|p| !p.is_nan()).count();
    for (r, a) in rows.iter_mut().zip(adj) {
        r.adj_p = a;
        r.crit_slope = r.beta > 0.0 && a < criteria.alpha;
        r.retained = r.error.is_none()
            && (!criteria.use_slope || r.crit_slope)
            && (!criteria.use_freq || r.crit_freq)
            && (!criteria.use_count || r.crit_count);
    }
    rows.sort_by(|a, b| cmp_nan_last(a.adj_p, b.adj_p).then_with(|| a.code.cmp(&b.code)));
    Ok(ScreeningResult {
        rows,
        family_size,
        n_days: calendar.len(),
    })
}

fn cmp_nan_last(a: f64, b: f64) -> Ordering {
    match (a.is_nan(), b.is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        _ => a.total_cmp(&b),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManhattanPoint {
    pub code: DiagnosisCategory,
    pub chapter: char,
    pub neg_log10_adj_p: f64,
    pub retained: bool,
}

/// Plot-ready points ordered by code.
pub fn manhattan(result: &ScreeningResult) -> Vec<ManhattanPoint> {
    let mut pts: Vec<ManhattanPoint> = result
        .rows
        .iter()
        .map(|r| ManhattanPoint {
            code: r.code.clone(),
            chapter: r.code.chapter(),
            neg_log10_adj_p: -r.adj_p.log10(),
            retained: r.retained,
        })
        .collect();
    pts.sort_by(|a, b| a.code.cmp(&b.code));
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{RaceEthnicity, Region, Sex};

    #[test]
    fn bh_examples() {
        assert_eq!(bh_adjust(&[0.04]), vec![0.04]);
        assert_eq!(bh_adjust(&[0.01, 0.02, 0.03, 0.04]), vec![0.04; 4]);
        assert_eq!(bh_adjust(&[0.005, 0.1]), vec![0.01, 0.1]);
        let a = bh_adjust(&[0.1, f64::NAN, 0.005]);
        assert_eq!(a[0], 0.1);
        assert!(a[1].is_nan());
        assert_eq!(a[2], 0.01);
        assert_eq!(bh_adjust(&[0.9, 0.8]), vec![0.9, 0.9]);
    }

    fn visit(id: usize, date: NaiveDate, code: &str) -> VisitRecord {
        VisitRecord {
            visit_id: id.to_string(),
            patient_id: id.to_string(),
            date,
            tract_id: Some("A".into()),
            age_years: Some(40),
            sex: Sex::Female,
            race_ethnicity: RaceEthnicity::White,
            region: Region::North,
            codes: [DiagnosisCategory::new(code).unwrap()].into(),
        }
    }

    #[test]
    fn counts_zero_filled() {
        let cal = SeasonCalendar::new(&(5..=9).collect(), (2012, 2012));
        assert_eq!(cal.len(), 153);
        let day = NaiveDate::from_ymd_opt(2012, 7, 4).unwrap();
        let other = NaiveDate::from_ymd_opt(2012, 8, 1).unwrap();
        let visits = vec![
            visit(1, day, "E86"),
            visit(2, day, "E86"),
            visit(3, day, "E86"),
            visit(4, other, "E86"),
            visit(5, day, "T67"),
        ];
        let e86 = DiagnosisCategory::new("E86").unwrap();
        let y = daily_counts(&visits, &e86, &cal);
        assert_eq!(y.len(), 153);
        assert_eq!(y[cal.position(day).unwrap()], 3);
        assert_eq!(y.iter().filter(|&&c| c > 0).count(), 2);
        let none = daily_counts(&visits, &DiagnosisCategory::new("X30").unwrap(), &cal);
        assert!(none.iter().all(|&c| c == 0));
        let all = all_daily_counts(&visits, &cal);
        assert_eq!(all[&e86], y);
        assert_eq!(all.len(), 2);
    }

    #[test]
    fn design_levels() {
        let cal = SeasonCalendar::new(&(5..=9).collect(), (2011, 2013));
        let tmax = vec![25.0; cal.len()];
        let d = stage1_design(&cal, &tmax, &HashSet::new(), false).unwrap();
        // intercept, tmax, 2 years, 4 months, 6 weekdays, holiday
        assert_eq!(d.ncols(), 1 + 1 + 2 + 4 + 6 + 1);
        let d = stage1_design(&cal, &tmax, &HashSet::new(), true).unwrap();
        assert_eq!(d.ncols(), 1 + 1 + 1 + 4 + 6 + 1);
    }
}
