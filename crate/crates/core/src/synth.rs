//! Synthetic visit and temperature generator with known exposure-response
//! truth, used to check recovery end to end.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::dlnm::{standard_contrasts, Contrast};
use crate::exposure::{percentile_anchors, ExposureSeries, PercentileAnchors};
use crate::ingest::{DiagnosisCategory, RaceEthnicity, Region, Sex, VisitRecord};

/// One linear exposure-response term at a single lag:
/// `slope * (t - p50)` on the log-rate scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectTerm {
    pub lag: usize,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedCode {
    pub index: usize,
    pub terms: Vec<EffectTerm>,
    /// Daily baseline rate; drawn like the others when absent.
    pub baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemographicMix {
    /// Female, Male, Other, Missing.
    pub sex: [f64; 4],
    /// Asian, Black, White, Other, Missing.
    pub race_ethnicity: [f64; 5],
    /// 18-24, 25-44, 45-64, 65+.
    pub age_group: [f64; 4],
    pub missing_age: f64,
    pub missing_tract: f64,
}

impl Default for DemographicMix {
    fn default() -> Self {
        Self {
            sex: [0.55, 0.44, 0.0005, 0.0095],
            race_ethnicity: [0.03, 0.55, 0.25, 0.15, 0.02],
            age_group: [0.15, 0.38, 0.30, 0.17],
            missing_age: 0.002,
            missing_tract: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthScenario {
    pub n_codes: usize,
    pub years: (i32, i32),
    pub season_months: BTreeSet<u32>,
    /// First and last month with temperature readings; must cover the
    /// season plus lag and referent margins.
    pub temperature_months: (u32, u32),
    pub baseline_range: (f64, f64),
    pub injected: Vec<InjectedCode>,
    /// Gamma mixing variance on the daily rate; 0 is plain Poisson.
    pub overdispersion: f64,
    /// Log-rate effects Mon..Sun.
    pub dow_effects: [f64; 7],
    /// Amplitude of a cosine month effect over the season.
    pub month_effect: f64,
    pub year_trend: f64,
    pub holiday_effect: f64,
    pub temp_mean: f64,
    pub temp_amplitude: f64,
    pub ar_phi: f64,
    pub anomaly_sd: f64,
    pub n_tracts: usize,
    pub tract_offset_sd: f64,
    pub tract_noise_sd: f64,
    pub patient_pool: usize,
    pub demographics: DemographicMix,
    pub seed: u64,
}

impl Default for SynthScenario {
    fn default() -> Self {
        Self {
            n_codes: 1800,
            years: (2011, 2023),
            season_months: (5..=9).collect(),
            temperature_months: (3, 11),
            baseline_range: (0.02, 1.0),
            injected: (0..10)
                .map(|i| InjectedCode {
                    index: i * 180 + 7,
                    terms: vec![EffectTerm { lag: 0, slope: 0.1 }],
                    baseline: Some(0.25),
                })
                .collect(),
            overdispersion: 0.05,
            dow_effects: [0.08, 0.03, 0.0, 0.0, 0.0, -0.05, -0.06],
            month_effect: 0.05,
            year_trend: 0.01,
            holiday_effect: -0.1,
            temp_mean: 27.0,
            temp_amplitude: 4.0,
            ar_phi: 0.6,
            anomaly_sd: 3.5,
            n_tracts: 40,
            tract_offset_sd: 0.8,
            tract_noise_sd: 0.0,
            patient_pool: 400_000,
            demographics: DemographicMix::default(),
            seed: 20_240_601,
        }
    }
}

pub const MAX_CODES: usize = 2600;

/// Synthetic category name for a code index: `A00`..`Z99`.
pub fn code_name(index: usize) -> DiagnosisCategory {
    let letter = (b'A' + (index / 100 % 26) as u8) as char;
    DiagnosisCategory::new(&format!("{letter}{:02}", index % 100)).expect("valid pattern")
}

impl SynthScenario {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_codes == 0 || self.n_codes > MAX_CODES {
            return Err(format!("n_codes must be in 1..={MAX_CODES}"));
        }
        if self.years.0 > self.years.1 {
            return Err("synth years out of order".into());
        }
        let (a, b) = self.temperature_months;
        if !(1..=12).contains(&a) || !(1..=12).contains(&b) || a > b {
            return Err("temperature_months must be an ordered pair in 1..=12".into());
        }
        if self.season_months.iter().any(|m| *m < a || *m > b) {
            return Err("temperature_months must cover the season".into());
        }
        let (lo, hi) = self.baseline_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err("baseline_range must be positive and ordered".into());
        }
        if !(self.overdispersion >= 0.0) || !(self.anomaly_sd >= 0.0) || !(self.tract_noise_sd >= 0.0) {
            return Err("variances must be non-negative".into());
        }
        if !(self.ar_phi.abs() < 1.0) {
            return Err("ar_phi must lie in (-1, 1)".into());
        }
        if self.n_tracts == 0 || self.patient_pool == 0 {
            return Err("n_tracts and patient_pool must be positive".into());
        }
        for inj in &self.injected {
            if inj.index >= self.n_codes {
                return Err(format!("injected index {} beyond n_codes", inj.index));
            }
            if inj.terms.iter().any(|t| !t.slope.is_finite()) || inj.baseline.is_some_and(|b| !(b > 0.0)) {
                return Err("injected effects must be finite with positive baseline".into());
            }
        }
        Ok(())
    }

    pub fn terms_for(&self, index: usize) -> &[EffectTerm] {
        self.injected
            .iter()
            .find(|i| i.index == index)
            .map_or(&[], |i| i.terms.as_slice())
    }
}

/// Federal holidays (observed dates) of one year.
pub fn federal_holidays(year: i32) -> Vec<NaiveDate> {
    let nth = |month: u32, wd: Weekday, n: u8| NaiveDate::from_weekday_of_month_opt(year, month, wd, n).expect("exists");
    let last_monday_may = {
        let mut d = NaiveDate::from_ymd_opt(year, 5, 31).expect("valid");
        while d.weekday() != Weekday::Mon {
            d = d.pred_opt().expect("valid");
        }
        d
    };
    let observed = |m: u32, day: u32| {
        let d = NaiveDate::from_ymd_opt(year, m, day).expect("valid");
        match d.weekday() {
            Weekday::Sat => d.pred_opt().expect("valid"),
            Weekday::Sun => d.succ_opt().expect("valid"),
            _ => d,
        }
    };
    let mut v = vec![
        observed(1, 1),
        nth(1, Weekday::Mon, 3),
        nth(2, Weekday::Mon, 3),
        last_monday_may,
        observed(7, 4),
        nth(9, Weekday::Mon, 1),
        nth(10, Weekday::Mon, 2),
        observed(11, 11),
        nth(11, Weekday::Thu, 4),
        observed(12, 25),
    ];
    if year >= 2021 {
        v.push(observed(6, 19));
    }
    v.sort();
    v
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthRow {
    pub code: DiagnosisCategory,
    pub contrast: String,
    pub log_or: f64,
}

/// Analytic log-OR of `terms` at `target` versus `reference` for a contrast.
pub fn true_log_or(terms: &[EffectTerm], contrast: Contrast, target: f64, reference: f64) -> f64 {
    terms
        .iter()
        .filter(|t| match contrast {
            Contrast::Lag(l) => t.lag == l,
            Contrast::Cumulative(h) => t.lag <= h,
        })
        .map(|t| t.slope * (target - reference))
        .sum()
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub visits: Vec<VisitRecord>,
    /// (tract, date, tmax)
    pub readings: Vec<(String, NaiveDate, f64)>,
    pub holidays: HashSet<NaiveDate>,
    pub codes: Vec<DiagnosisCategory>,
    pub anchors: PercentileAnchors,
    pub truth: Vec<TruthRow>,
}

impl SynthData {
    pub fn exposure(&self) -> ExposureSeries {
        ExposureSeries::from_readings(self.readings.iter().cloned()).expect("generated readings are valid")
    }
}

fn pick<const N: usize>(rng: &mut ChaCha8Rng, w: &[f64; N]) -> usize {
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &x) in w.iter().enumerate() {
        if u < x {
            return i;
        }
        u -= x;
    }
    N - 1
}

const REGIONS: [Region; 7] = [
    Region::Central,
    Region::North,
    Region::Northwest,
    Region::South,
    Region::Southwest,
    Region::FarSouth,
    Region::West,
];

pub fn tract_name(i: usize) -> String {
    format!("T{i:04}")
}

/// Draws a full synthetic corpus. All randomness comes from one ChaCha
/// stream seeded with `scenario.seed`.
pub fn generate_synthetic(scenario: &SynthScenario) -> Result<SynthData, String> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    // temperatures
    let (m0, m1) = scenario.temperature_months;
    let mut offsets: Vec<f64> = (0..scenario.n_tracts)
        .map(|_| scenario.tract_offset_sd * std_normal.sample(&mut rng))
        .collect();
    let mean_off = offsets.iter().sum::<f64>() / offsets.len() as f64;
    offsets.iter_mut().for_each(|o| *o -= mean_off);
    let innov = (1.0 - scenario.ar_phi * scenario.ar_phi).sqrt() * scenario.anomaly_sd;
    let mut readings = Vec::new();
    for y in scenario.years.0..=scenario.years.1 {
        let start = NaiveDate::from_ymd_opt(y, m0, 1).expect("valid");
        let end = if m1 == 12 {
            NaiveDate::from_ymd_opt(y, 12, 31)
        } else {
            NaiveDate::from_ymd_opt(y, m1 + 1, 1).and_then(|d| d.pred_opt())
        }
        .expect("valid");
        let mut anomaly = scenario.anomaly_sd * std_normal.sample(&mut rng);
        for d in start.iter_days().take_while(|d| *d <= end) {
            let seasonal = scenario.temp_mean
                + scenario.temp_amplitude
                    * (2.0 * std::f64::consts::PI * (f64::from(d.ordinal()) - 196.0) / 365.25).cos();
            let base = seasonal + anomaly;
            for (ti, off) in offsets.iter().enumerate() {
                let noise = if scenario.tract_noise_sd > 0.0 {
                    scenario.tract_noise_sd * std_normal.sample(&mut rng)
                } else {
                    0.0
                };
                readings.push((tract_name(ti), d, base + off + noise));
            }
            anomaly = scenario.ar_phi * anomaly + innov * std_normal.sample(&mut rng);
        }
    }
    let series = ExposureSeries::from_readings(readings.iter().cloned()).map_err(|e| e.to_string())?;
    let citywide = series.citywide();
    let anchors =
        percentile_anchors(&citywide, &scenario.season_months, scenario.years).map_err(|e| e.to_string())?;

    let holidays: HashSet<NaiveDate> = (scenario.years.0..=scenario.years.1)
        .flat_map(federal_holidays)
        .collect();

    let season_days: Vec<NaiveDate> = citywide
        .keys()
        .copied()
        .filter(|d| scenario.season_months.contains(&d.month()) && (scenario.years.0..=scenario.years.1).contains(&d.year()))
        .collect();
    let months: Vec<u32> = scenario.season_months.iter().copied().collect();
    let month_eff = |m: u32| {
        let pos = months.iter().position(|&x| x == m).unwrap_or(0) as f64;
        let span = (months.len().max(2) - 1) as f64;
        scenario.month_effect * (std::f64::consts::PI * pos / span).cos()
    };
    let gamma = (scenario.overdispersion > 0.0)
        .then(|| Gamma::new(1.0 / scenario.overdispersion, scenario.overdispersion).expect("positive shape"));

    let codes: Vec<DiagnosisCategory> = (0..scenario.n_codes).map(code_name).collect();
    let (blo, bhi) = scenario.baseline_range;
    let mix = &scenario.demographics;
    let mut visits = Vec::new();
    let mut next_id = 0usize;
    for (ci, code) in codes.iter().enumerate() {
        let drawn = (blo.ln() + rng.random::<f64>() * (bhi.ln() - blo.ln())).exp();
        let baseline = scenario
            .injected
            .iter()
            .find(|i| i.index == ci)
            .and_then(|i| i.baseline)
            .unwrap_or(drawn);
        let terms = scenario.terms_for(ci);
        for &d in &season_days {
            let mut eta = baseline.ln()
                + scenario.dow_effects[d.weekday().num_days_from_monday() as usize]
                + month_eff(d.month())
                + scenario.year_trend * f64::from(d.year() - scenario.years.0);
            if holidays.contains(&d) {
                eta += scenario.holiday_effect;
            }
            for t in terms {
                let past = d - Days::new(t.lag as u64);
                let temp = citywide.get(&past).copied().ok_or_else(|| format!("no temperature on {past}"))?;
                eta += t.slope * (temp - anchors.p50);
            }
            let mut lambda = eta.exp();
            if let Some(g) = &gamma {
                lambda *= g.sample(&mut rng);
            }
            let n = if lambda > 0.0 {
                Poisson::new(lambda).expect("positive rate").sample(&mut rng) as u64
            } else {
                0
            };
            for _ in 0..n {
                let tract_i = rng.random_range(0..scenario.n_tracts);
                let has_tract = rng.random::<f64>() >= mix.missing_tract;
                let age = if rng.random::<f64>() < mix.missing_age {
                    None
                } else {
                    let (lo, hi) = [(18, 24), (25, 44), (45, 64), (65, 95)][pick(&mut rng, &mix.age_group)];
                    Some(rng.random_range(lo..=hi))
                };
                let sex = [Sex::Female, Sex::Male, Sex::Other, Sex::Missing][pick(&mut rng, &mix.sex)];
                let race = [
                    RaceEthnicity::Asian,
                    RaceEthnicity::BlackOrAfricanAmerican,
                    RaceEthnicity::White,
                    RaceEthnicity::Other,
                    RaceEthnicity::Missing,
                ][pick(&mut rng, &mix.race_ethnicity)];
                let patient = rng.random_range(0..scenario.patient_pool);
                visits.push(VisitRecord {
                    visit_id: format!("V{next_id:08}"),
                    patient_id: format!("P{patient:07}"),
                    date: d,
                    tract_id: has_tract.then(|| tract_name(tract_i)),
                    age_years: age,
                    sex,
                    race_ethnicity: race,
                    region: if has_tract { REGIONS[tract_i % REGIONS.len()] } else { Region::Missing },
                    codes: [code.clone()].into(),
                });
                next_id += 1;
            }
        }
    }

    let max_lag = scenario
        .injected
        .iter()
        .flat_map(|i| i.terms.iter().map(|t| t.lag))
        .max()
        .unwrap_or(0)
        .max(5);
    let contrasts = standard_contrasts(max_lag);
    let truth = codes
        .iter()
        .enumerate()
        .flat_map(|(ci, code)| {
            let terms = scenario.terms_for(ci);
            let anchors = &anchors;
            contrasts.iter().map(move |&c| TruthRow {
                code: code.clone(),
                contrast: c.to_string(),
                log_or: true_log_or(terms, c, anchors.p95, anchors.p50),
            })
        })
        .collect();

    Ok(SynthData {
        visits,
        readings,
        holidays,
        codes,
        anchors,
        truth,
    })
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

/// Writes `visits.csv`, `temperature.csv`, `holidays.csv` and `truth.csv`.
pub fn write_synthetic(data: &SynthData, dir: &std::path::Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("visits.csv"))?;
    w.write_record([
        "visit_id",
        "patient_id",
        "date",
        "tract_id",
        "age_years",
        "sex",
        "race_ethnicity",
        "region",
        "code",
        "code_system",
    ])?;
    for v in &data.visits {
        for c in &v.codes {
            let region = if v.region == Region::Missing { String::new() } else { v.region.to_string() };
            let sex = if v.sex == Sex::Missing { String::new() } else { v.sex.to_string() };
            let race = if v.race_ethnicity == RaceEthnicity::Missing {
                String::new()
            } else {
                v.race_ethnicity.to_string()
            };
            w.write_record([
                v.visit_id.as_str(),
                v.patient_id.as_str(),
                &v.date.to_string(),
                &opt_str(&v.tract_id),
                &opt_str(&v.age_years),
                &sex,
                &race,
                &region,
                &format!("{c}.9"),
                "ICD10",
            ])?;
        }
    }
    w.flush()?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("temperature.csv"))?);
    writeln!(f, "date,tract_id,tmax_c")?;
    for (t, d, v) in &data.readings {
        writeln!(f, "{d},{t},{v}")?;
    }
    f.flush()?;

    let mut hol: Vec<&NaiveDate> = data.holidays.iter().collect();
    hol.sort();
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("holidays.csv"))?);
    writeln!(f, "date")?;
    for d in hol {
        writeln!(f, "{d}")?;
    }
    f.flush()?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("truth.csv"))?);
    writeln!(f, "code,contrast,log_or,or")?;
    for r in &data.truth {
        writeln!(f, "{},{},{},{}", r.code, r.contrast, r.log_or, r.log_or.exp())?;
    }
    f.flush()
}
