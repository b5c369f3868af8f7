//! Stage 2: case-crossover referent selection, strata assembly, per-code
//! DLNM fits, subgroup runs and the sensitivity comparison.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Days, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clogitfit::{fit_clogit, ClogitError, ClogitOptions, StabilityFlags, Stratum};
use crate::dlnm::{predict_or, significance_filter, standard_contrasts, CrossBasis, CrossBasisSpec, DlnmError};
use crate::effect::EffectEstimate;
use crate::exposure::{ExposureSeries, PercentileAnchors};
use crate::ingest::{DiagnosisCategory, RaceEthnicity, Region, Sex, VisitRecord};

#[derive(Debug, Error)]
pub enum CrossoverError {
    #[error("no control days for case on {0}")]
    NoControls(NaiveDate),
    #[error("no exposure for {date} at {location}")]
    MissingExposure { date: NaiveDate, location: String },
    #[error("no usable strata")]
    NoStrata,
    #[error("cross-basis: {0}")]
    Dlnm(#[from] DlnmError),
    #[error("fit: {0}")]
    Clogit(#[from] ClogitError),
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error("percentile {0} outside (0, 1)")]
    BadPercentile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferentScheme {
    /// Same weekday, same calendar month and year; all such days.
    TimeStratifiedMonth,
    /// The other same-weekday days of a fixed 28-day tile; tiles start at the
    /// first Monday on or after the first day of `first_month` each year.
    Fixed28Day { first_month: u32 },
}

impl ReferentScheme {
    /// Start of the 28-day tile holding `date`. The grid of a year starts one
    /// tile before its epoch; earlier days belong to the previous year's grid,
    /// so a season that runs past New Year keeps one grid.
    pub fn tile_start(first_month: u32, date: NaiveDate) -> NaiveDate {
        let mut epoch = first_monday(date.year(), first_month);
        if (date - epoch).num_days() < -28 {
            epoch = first_monday(date.year() - 1, first_month);
        }
        let offset = (date - epoch).num_days().div_euclid(28);
        epoch + chrono::Duration::days(offset * 28)
    }
}

fn first_monday(year: i32, month: u32) -> NaiveDate {
    let d = NaiveDate::from_ymd_opt(year, month, 1).expect("valid month");
    let ahead = (7 - d.weekday().num_days_from_monday()) % 7;
    d + Days::new(u64::from(ahead))
}

/// Control days for a case day under `scheme`, ascending.
pub fn select_referents(case_date: NaiveDate, scheme: ReferentScheme) -> Result<Vec<NaiveDate>, CrossoverError> {
    let out: Vec<NaiveDate> = match scheme {
        ReferentScheme::TimeStratifiedMonth => {
            let first = NaiveDate::from_ymd_opt(case_date.year(), case_date.month(), 1).expect("valid date");
            let wd = case_date.weekday();
            first
                .iter_days()
                .take_while(|d| d.month() == case_date.month())
                .filter(|d| d.weekday() == wd && *d != case_date)
                .collect()
        }
        ReferentScheme::Fixed28Day { first_month } => {
            let start = ReferentScheme::tile_start(first_month, case_date);
            let k = (case_date - start).num_days() % 7;
            (0..4)
                .map(|w| start + Days::new((k + 7 * w) as u64))
                .filter(|&d| d != case_date)
                .collect()
        }
    };
    if out.is_empty() {
        return Err(CrossoverError::NoControls(case_date));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingTractPolicy {
    /// Visits without a tract are left out of stage 2.
    Exclude,
    /// Visits without a tract use the citywide series.
    Citywide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Options {
    pub missing_tract: MissingTractPolicy,
    /// Use the citywide value when a tract lacks a reading on a needed day.
    pub tract_fallback: bool,
    /// Use citywide temperature for every visit instead of the tract series.
    pub citywide_exposure: bool,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Self {
            missing_tract: MissingTractPolicy::Exclude,
            tract_fallback: true,
            citywide_exposure: false,
        }
    }
}

/// One analysis configuration of the stage-2 model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisVariant {
    pub name: String,
    pub ref_percentile: f64,
    pub target_percentile: f64,
    /// B-spline degree of the exposure basis (one knot at the median).
    pub exposure_degree: usize,
    pub max_lag: usize,
    pub lag_knots: usize,
    pub referent: ReferentScheme,
}

pub const VARIANT_NAMES: [&str; 5] = ["primary", "sens_i", "sens_ii", "sens_iii", "sens_iv"];

impl AnalysisVariant {
    pub fn primary() -> Self {
        Self {
            name: "primary".into(),
            ref_percentile: 0.50,
            target_percentile: 0.95,
            exposure_degree: 2,
            max_lag: 3,
            lag_knots: 1,
            referent: ReferentScheme::TimeStratifiedMonth,
        }
    }

    /// Named preset. `first_month` anchors the fixed-tile scheme.
    pub fn preset(name: &str, first_month: u32) -> Result<Self, CrossoverError> {
        let mut v = Self::primary();
        match name {
            "primary" => {}
            "sens_i" => v.ref_percentile = 0.70,
            "sens_ii" => v.referent = ReferentScheme::Fixed28Day { first_month },
            "sens_iii" => v.exposure_degree = 3,
            "sens_iv" => {
                v.max_lag = 5;
                v.lag_knots = 2;
            }
            other => return Err(CrossoverError::UnknownVariant(other.to_string())),
        }
        v.name = name.to_string();
        Ok(v)
    }

    pub fn all(first_month: u32) -> Vec<Self> {
        VARIANT_NAMES
            .iter()
            .map(|n| Self::preset(n, first_month).expect("known preset"))
            .collect()
    }

    /// Name of the preset with identical settings, if any.
    pub fn identify(&self, first_month: u32) -> Option<&'static str> {
        VARIANT_NAMES.iter().copied().find(|n| {
            let mut p = Self::preset(n, first_month).expect("known preset");
            p.name.clone_from(&self.name);
            &p == self
        })
    }
}

/// Exposure history for `date` and the `max_lag` days before it.
fn lagged(
    exposure: &ExposureSeries,
    tract: Option<&str>,
    date: NaiveDate,
    max_lag: usize,
    opts: &Stage2Options,
) -> Result<Vec<f64>, CrossoverError> {
    (0..=max_lag)
        .map(|l| {
            let d = date - Days::new(l as u64);
            let v = match tract {
                Some(t) if !opts.citywide_exposure => exposure.value(Some(t), d, opts.tract_fallback).ok(),
                _ => exposure.citywide_value(d).ok(),
            };
            v.ok_or_else(|| CrossoverError::MissingExposure {
                date: d,
                location: tract.unwrap_or("citywide").to_string(),
            })
        })
        .collect()
}

/// Case and control exposure histories for one visit, before basis evaluation.
#[derive(Debug, Clone)]
pub struct RawStratum {
    pub id: String,
    pub case_date: NaiveDate,
    pub dates: Vec<NaiveDate>,
    /// One lag history per member; the case is member 0.
    pub histories: Vec<Vec<f64>>,
    pub holiday: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StrataDrops {
    pub missing_tract: usize,
    pub missing_exposure: usize,
    pub no_controls: usize,
}

impl StrataDrops {
    pub fn total(&self) -> usize {
        self.missing_tract + self.missing_exposure + self.no_controls
    }
}

/// Collects exposure histories for every visit; visits that cannot be placed
/// are counted and skipped.
pub fn collect_histories<'a, I>(
    visits: I,
    exposure: &ExposureSeries,
    scheme: ReferentScheme,
    max_lag: usize,
    holidays: &HashSet<NaiveDate>,
    opts: &Stage2Options,
) -> (Vec<RawStratum>, StrataDrops)
where
    I: IntoIterator<Item = &'a VisitRecord>,
{
    let mut out = Vec::new();
    let mut drops = StrataDrops::default();
    'visit: for v in visits {
        let tract = match (&v.tract_id, opts.missing_tract) {
            (Some(t), _) => Some(t.as_str()),
            (None, MissingTractPolicy::Citywide) => None,
            (None, MissingTractPolicy::Exclude) if opts.citywide_exposure => None,
            (None, MissingTractPolicy::Exclude) => {
                drops.missing_tract += 1;
                continue;
            }
        };
        let controls = match select_referents(v.date, scheme) {
            Ok(c) => c,
            Err(_) => {
                drops.no_controls += 1;
                continue;
            }
        };
        let dates: Vec<NaiveDate> = std::iter::once(v.date).chain(controls).collect();
        let mut histories = Vec::with_capacity(dates.len());
        for &d in &dates {
            match lagged(exposure, tract, d, max_lag, opts) {
                Ok(h) => histories.push(h),
                Err(e) => {
                    log::debug!("visit {}: {e}", v.visit_id);
                    drops.missing_exposure += 1;
                    continue 'visit;
                }
            }
        }
        out.push(RawStratum {
            id: v.visit_id.clone(),
            case_date: v.date,
            holiday: dates.iter().map(|d| holidays.contains(d)).collect(),
            dates,
            histories,
        });
    }
    (out, drops)
}

/// Cross-basis for a sample: exposure knot at `knot`, boundaries at the range
/// of every lagged exposure in the sample widened to cover `extra` points.
pub fn sample_crossbasis(
    raw: &[RawStratum],
    variant: &AnalysisVariant,
    knot: f64,
    extra: &[f64],
) -> Result<CrossBasis<f64>, CrossoverError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for t in raw.iter().flat_map(|s| s.histories.iter().flatten()).chain(extra) {
        lo = lo.min(*t);
        hi = hi.max(*t);
    }
    if !(lo < hi) {
        return Err(CrossoverError::NoStrata);
    }
    let spec = CrossBasisSpec::new(variant.exposure_degree, vec![knot], (lo, hi), variant.max_lag, variant.lag_knots)?;
    Ok(CrossBasis::new(spec)?)
}

/// Design rows for each stratum: cross-basis row then the holiday indicator.
pub fn build_strata(raw: &[RawStratum], basis: &CrossBasis<f64>) -> Result<Vec<Stratum<f64>>, CrossoverError> {
    let k = basis.ncols();
    // visits sharing a tract-day share histories; evaluate each once
    let mut cache: HashMap<Vec<u64>, Vec<f64>> = HashMap::new();
    raw.iter()
        .map(|s| {
            let members = s
                .histories
                .iter()
                .zip(&s.holiday)
                .enumerate()
                .map(|(i, (h, &hol))| {
                    let key: Vec<u64> = h.iter().map(|t| t.to_bits()).collect();
                    let mut row = match cache.get(&key) {
                        Some(r) => r.clone(),
                        None => {
                            let mut r = vec![0.0; k + 1];
                            basis.row_into(h, &mut r[..k])?;
                            cache.insert(key, r.clone());
                            r
                        }
                    };
                    row[k] = if hol { 1.0 } else { 0.0 };
                    Ok((row, i == 0))
                })
                .collect::<Result<Vec<_>, DlnmError>>()?;
            Ok(Stratum::new(s.id.clone(), members)?)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CodeResult {
    pub code: DiagnosisCategory,
    pub variant: String,
    pub estimates: Vec<EffectEstimate<f64>>,
    pub n_strata: usize,
    pub n_dropped_strata: usize,
    pub drops: StrataDrops,
    pub stability: StabilityFlags,
    pub significant: bool,
    pub error: Option<String>,
    pub target_temp: f64,
    pub ref_temp: f64,
}

impl CodeResult {
    pub fn estimate(&self, contrast: &str) -> Option<&EffectEstimate<f64>> {
        self.estimates.iter().find(|e| e.contrast_name == contrast)
    }
}

/// Shared stage-2 inputs.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Context<'a> {
    pub exposure: &'a ExposureSeries,
    pub anchors: &'a PercentileAnchors,
    pub holidays: &'a HashSet<NaiveDate>,
    pub options: &'a Stage2Options,
}

fn anchor(anchors: &PercentileAnchors, q: f64) -> Result<f64, CrossoverError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(CrossoverError::BadPercentile(q));
    }
    anchors.quantile(q).ok_or(CrossoverError::BadPercentile(q))
}

/// Fits one code on the given visits.
pub fn fit_code<'a, I>(
    code: &DiagnosisCategory,
    visits: I,
    ctx: &Stage2Context<'_>,
    variant: &AnalysisVariant,
) -> CodeResult
where
    I: IntoIterator<Item = &'a VisitRecord>,
{
    let mut result = CodeResult {
        code: code.clone(),
        variant: variant.name.clone(),
        estimates: Vec::new(),
        n_strata: 0,
        n_dropped_strata: 0,
        drops: StrataDrops::default(),
        stability: StabilityFlags::default(),
        significant: false,
        error: None,
        target_temp: f64::NAN,
        ref_temp: f64::NAN,
    };
    let (raw, drops) = collect_histories(
        visits,
        ctx.exposure,
        variant.referent,
        variant.max_lag,
        ctx.holidays,
        ctx.options,
    );
    result.n_dropped_strata = drops.total();
    result.drops = drops;
    let outcome = (|| -> Result<(), CrossoverError> {
        let target = anchor(ctx.anchors, variant.target_percentile)?;
        let reference = anchor(ctx.anchors, variant.ref_percentile)?;
        result.target_temp = target;
        result.ref_temp = reference;
        if raw.is_empty() {
            return Err(CrossoverError::NoStrata);
        }
        let basis = sample_crossbasis(&raw, variant, ctx.anchors.p50, &[target, reference])?;
        let strata = build_strata(&raw, &basis)?;
        let mut opts = ClogitOptions::default();
        opts.stability.columns = Some(0..basis.ncols());
        let fit = fit_clogit(&strata, &opts);
        let fit = match fit {
            Ok(f) => f,
            Err(e) => {
                if matches!(e, ClogitError::NoInformativeStrata) {
                    result.n_dropped_strata += strata.len();
                }
                return Err(e.into());
            }
        };
        result.n_strata = fit.n_strata;
        result.n_dropped_strata += fit.n_dropped_strata;
        result.stability = fit.stability;
        result.estimates = predict_or(
            &basis,
            &fit.beta,
            &fit.cov,
            target,
            reference,
            &standard_contrasts(variant.max_lag),
        )?;
        result.significant = !significance_filter(&[(String::new(), result.estimates.clone())]).is_empty();
        Ok(())
    })();
    if let Err(e) = outcome {
        log::warn!("stage 2 {} [{}]: {e}", code, variant.name);
        result.error = Some(e.to_string());
        result.stability = StabilityFlags {
            nonconvergence: true,
            ..StabilityFlags::default()
        };
    }
    result
}

fn visits_by_code<'a>(
    visits: &'a [VisitRecord],
    codes: &[DiagnosisCategory],
) -> BTreeMap<DiagnosisCategory, Vec<&'a VisitRecord>> {
    let wanted: BTreeSet<&DiagnosisCategory> = codes.iter().collect();
    let mut map: BTreeMap<DiagnosisCategory, Vec<&VisitRecord>> =
        codes.iter().map(|c| (c.clone(), Vec::new())).collect();
    for v in visits {
        for c in v.codes.iter().filter(|c| wanted.contains(c)) {
            map.get_mut(c).expect("wanted code").push(v);
        }
    }
    map
}

/// Fits every code under one variant; results ordered by code.
pub fn run_stage2(
    codes: &[DiagnosisCategory],
    visits: &[VisitRecord],
    ctx: &Stage2Context<'_>,
    variant: &AnalysisVariant,
) -> Vec<CodeResult> {
    let by_code = visits_by_code(visits, codes);
    let items: Vec<_> = by_code.iter().collect();
    items
        .par_iter()
        .map(|(code, vs)| fit_code(code, vs.iter().copied(), ctx, variant))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratVar {
    Sex,
    AgeGroup,
    RaceEthnicity,
    Region,
}

impl StratVar {
    pub const ALL: [StratVar; 4] = [Self::Sex, Self::AgeGroup, Self::RaceEthnicity, Self::Region];

    /// Stratum label of a visit; `None` for missing values.
    pub fn label(&self, v: &VisitRecord) -> Option<String> {
        match self {
            Self::Sex => (v.sex != Sex::Missing).then(|| v.sex.to_string()),
            Self::AgeGroup => v.age_group().map(|g| g.label().to_string()),
            Self::RaceEthnicity => {
                (v.race_ethnicity != RaceEthnicity::Missing).then(|| v.race_ethnicity.to_string())
            }
            Self::Region => (v.region != Region::Missing).then(|| v.region.to_string()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sex => "sex",
            Self::AgeGroup => "age_group",
            Self::RaceEthnicity => "race_ethnicity",
            Self::Region => "region",
        }
    }
}

impl fmt::Display for StratVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StratVar {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown stratification variable {s:?}"))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StratifiedResult {
    pub strat_var: StratVar,
    pub stratum: String,
    pub result: CodeResult,
}

/// Refits each code within each stratum of `strat_var`. When `rescreen` is
/// given it picks the codes for each stratum from that stratum's visits;
/// otherwise `codes` is used everywhere.
pub fn run_stratified(
    codes: &[DiagnosisCategory],
    visits: &[VisitRecord],
    ctx: &Stage2Context<'_>,
    variant: &AnalysisVariant,
    strat_var: StratVar,
    rescreen: Option<&(dyn Fn(&[VisitRecord]) -> Vec<DiagnosisCategory> + Sync)>,
) -> Vec<StratifiedResult> {
    let mut groups: BTreeMap<String, Vec<VisitRecord>> = BTreeMap::new();
    for v in visits {
        if let Some(l) = strat_var.label(v) {
            groups.entry(l).or_default().push(v.clone());
        }
    }
    let mut out = Vec::new();
    for (label, subset) in &groups {
        let chosen = match rescreen {
            Some(f) => f(subset),
            None => codes.to_vec(),
        };
        for r in run_stage2(&chosen, subset, ctx, variant) {
            if !r.stability.is_stable {
                log::info!(
                    "{strat_var}={label} {}: unstable ({})",
                    r.code,
                    r.stability.reason()
                );
            }
            out.push(StratifiedResult {
                strat_var,
                stratum: label.clone(),
                result: r,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SensitivityRow {
    pub variant: String,
    pub dropped_codes: Vec<DiagnosisCategory>,
    pub new_codes: Vec<DiagnosisCategory>,
}

/// Significant-set differences of each variant against `reference`.
pub fn run_sensitivity(reference: &[CodeResult], variants: &[(String, Vec<CodeResult>)]) -> Vec<SensitivityRow> {
    let sig = |rs: &[CodeResult]| -> BTreeSet<DiagnosisCategory> {
        rs.iter().filter(|r| r.significant).map(|r| r.code.clone()).collect()
    };
    let base = sig(reference);
    variants
        .iter()
        .map(|(name, rs)| {
            let s = sig(rs);
            SensitivityRow {
                variant: name.clone(),
                dropped_codes: base.difference(&s).cloned().collect(),
                new_codes: s.difference(&base).cloned().collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn month_scheme_examples() {
        assert_eq!(
            select_referents(d("2012-07-04"), ReferentScheme::TimeStratifiedMonth).unwrap(),
            vec![d("2012-07-11"), d("2012-07-18"), d("2012-07-25")]
        );
        assert_eq!(
            select_referents(d("2013-05-01"), ReferentScheme::TimeStratifiedMonth).unwrap(),
            vec![d("2013-05-08"), d("2013-05-15"), d("2013-05-22"), d("2013-05-29")]
        );
    }

    #[test]
    fn fixed_scheme_tiles() {
        let scheme = ReferentScheme::Fixed28Day { first_month: 5 };
        // first Monday of May 2012 is the 7th
        assert_eq!(ReferentScheme::tile_start(5, d("2012-05-07")), d("2012-05-07"));
        assert_eq!(ReferentScheme::tile_start(5, d("2012-06-03")), d("2012-05-07"));
        assert_eq!(ReferentScheme::tile_start(5, d("2012-06-04")), d("2012-06-04"));
        assert_eq!(ReferentScheme::tile_start(5, d("2012-05-01")), d("2012-04-09"));
        let c = select_referents(d("2012-05-16"), scheme).unwrap();
        assert_eq!(c, vec![d("2012-05-09"), d("2012-05-23"), d("2012-05-30")]);
        for day in d("2012-05-01").iter_days().take(153) {
            let c = select_referents(day, scheme).unwrap();
            assert_eq!(c.len(), 3);
            let t = ReferentScheme::tile_start(5, day);
            for x in c {
                assert_eq!(x.weekday(), day.weekday());
                assert_eq!(ReferentScheme::tile_start(5, x), t);
            }
        }
    }

    #[test]
    fn presets_identify() {
        for name in VARIANT_NAMES {
            let v = AnalysisVariant::preset(name, 5).unwrap();
            assert_eq!(v.identify(5), Some(name));
        }
        let mut v = AnalysisVariant::primary();
        v.ref_percentile = 0.70;
        assert_eq!(v.identify(5), Some("sens_i"));
        v.max_lag = 7;
        assert_eq!(v.identify(5), None);
        assert!(AnalysisVariant::preset("sens_v", 5).is_err());
    }

    #[test]
    fn self_comparison_is_empty() {
        let rows = vec![];
        let diff = run_sensitivity(&rows, &[("primary".into(), rows.clone())]);
        assert!(diff[0].dropped_codes.is_empty() && diff[0].new_codes.is_empty());
    }
}
