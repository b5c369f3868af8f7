//! Tract and citywide daily maximum temperature series, warm-season
//! percentile anchors and extreme-heat classification.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExposureError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column {0:?}")]
    MissingColumn(String),
    #[error("malformed row {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("grid cell {0:?} has no tract membership")]
    UnknownCell(String),
    #[error("tract {tract:?} has no temperature on {date}")]
    EmptyTract { tract: String, date: NaiveDate },
    #[error("no temperature data on {0}")]
    NoData(NaiveDate),
    #[error("empty series")]
    Empty,
    #[error("conflicting temperatures for tract {tract:?} on {date}")]
    Conflict { tract: String, date: NaiveDate },
}

/// Per-tract daily maximum temperature with a derived citywide series.
/// Values are stored densely (tract × day) over the covered date span, with
/// NaN where a tract has no reading.
#[derive(Debug, Clone)]
pub struct ExposureSeries {
    start: NaiveDate,
    n_days: usize,
    tracts: Vec<String>,
    tract_index: HashMap<String, usize>,
    values: Vec<f64>,
    citywide: Vec<f64>,
}

impl ExposureSeries {
    /// Builds a series from `(tract, date, tmax)` readings. Duplicate
    /// readings must agree.
    pub fn from_readings<I>(readings: I) -> Result<Self, ExposureError>
    where
        I: IntoIterator<Item = (String, NaiveDate, f64)>,
    {
        let mut by_tract: BTreeMap<String, BTreeMap<NaiveDate, f64>> = BTreeMap::new();
        for (tract, date, t) in readings {
            if !t.is_finite() {
                return Err(ExposureError::MalformedRow {
                    line: 0,
                    reason: format!("non-finite temperature for {tract} on {date}"),
                });
            }
            let slot = by_tract.entry(tract.clone()).or_default();
            if let Some(&prev) = slot.get(&date) {
                if prev != t {
                    return Err(ExposureError::Conflict { tract, date });
                }
            }
            slot.insert(date, t);
        }
        let dates: BTreeSet<NaiveDate> = by_tract.values().flat_map(|m| m.keys().copied()).collect();
        let (Some(&start), Some(&end)) = (dates.first(), dates.last()) else {
            return Err(ExposureError::Empty);
        };
        let n_days = (end - start).num_days() as usize + 1;
        let tracts: Vec<String> = by_tract.keys().cloned().collect();
        let mut values = vec![f64::NAN; tracts.len() * n_days];
        for (ti, m) in by_tract.values().enumerate() {
            for (d, &t) in m {
                values[ti * n_days + (*d - start).num_days() as usize] = t;
            }
        }
        let citywide = (0..n_days)
            .map(|di| {
                let (mut s, mut n) = (0.0, 0usize);
                for ti in 0..tracts.len() {
                    let v = values[ti * n_days + di];
                    if !v.is_nan() {
                        s += v;
                        n += 1;
                    }
                }
                if n == 0 { f64::NAN } else { s / n as f64 }
            })
            .collect();
        let tract_index = tracts.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self {
            start,
            n_days,
            tracts,
            tract_index,
            values,
            citywide,
        })
    }

    /// Reads `date,tract_id,tmax_c` rows.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, ExposureError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let h = rdr.headers()?.clone();
        let col = |n: &str| h.iter().position(|x| x == n).ok_or_else(|| ExposureError::MissingColumn(n.into()));
        let (ci, ti, vi) = (col("date")?, col("tract_id")?, col("tmax_c")?);
        let mut rows = Vec::new();
        for (n, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = n as u64 + 2;
            let date = parse_date(rec.get(ci).unwrap_or(""), line)?;
            let t = parse_temp(rec.get(vi).unwrap_or(""), line)?;
            let tract = rec.get(ti).unwrap_or("").to_string();
            if tract.is_empty() {
                return Err(ExposureError::MalformedRow {
                    line,
                    reason: "empty tract_id".into(),
                });
            }
            rows.push((tract, date, t));
        }
        Self::from_readings(rows)
    }

    pub fn from_path(path: &Path) -> Result<Self, ExposureError> {
        Self::from_reader(open(path)?)
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn end(&self) -> NaiveDate {
        self.start + chrono::Days::new(self.n_days as u64 - 1)
    }

    pub fn tracts(&self) -> &[String] {
        &self.tracts
    }

    fn day_index(&self, date: NaiveDate) -> Option<usize> {
        let d = (date - self.start).num_days();
        (d >= 0 && (d as usize) < self.n_days).then_some(d as usize)
    }

    pub fn tract_value(&self, tract: &str, date: NaiveDate) -> Result<f64, ExposureError> {
        let empty = || ExposureError::EmptyTract {
            tract: tract.to_string(),
            date,
        };
        let ti = *self.tract_index.get(tract).ok_or_else(empty)?;
        let di = self.day_index(date).ok_or_else(empty)?;
        let v = self.values[ti * self.n_days + di];
        if v.is_nan() { Err(empty()) } else { Ok(v) }
    }

    pub fn citywide_value(&self, date: NaiveDate) -> Result<f64, ExposureError> {
        self.day_index(date)
            .map(|di| self.citywide[di])
            .filter(|v| !v.is_nan())
            .ok_or(ExposureError::NoData(date))
    }

    /// Tract value, or the citywide value when `tract` is `None` (or lacks
    /// a reading) and `fallback` is set.
    pub fn value(&self, tract: Option<&str>, date: NaiveDate, fallback: bool) -> Result<f64, ExposureError> {
        match tract {
            Some(t) => match self.tract_value(t, date) {
                Err(ExposureError::EmptyTract { .. }) if fallback => self.citywide_value(date),
                r => r,
            },
            None if fallback => self.citywide_value(date),
            None => Err(ExposureError::EmptyTract {
                tract: String::new(),
                date,
            }),
        }
    }

    /// Citywide series as a date map, skipping days without data.
    pub fn citywide(&self) -> BTreeMap<NaiveDate, f64> {
        citywide_series(self)
    }
}

/// Averages member-cell readings into tract readings, then builds the series.
pub fn link_grid_to_tracts(
    grid_values: &[(String, NaiveDate, f64)],
    membership: &HashMap<String, String>,
) -> Result<ExposureSeries, ExposureError> {
    let mut acc: BTreeMap<(String, NaiveDate), (f64, usize)> = BTreeMap::new();
    for (cell, date, t) in grid_values {
        let tract = membership
            .get(cell)
            .ok_or_else(|| ExposureError::UnknownCell(cell.clone()))?;
        let e = acc.entry((tract.clone(), *date)).or_insert((0.0, 0));
        e.0 += t;
        e.1 += 1;
    }
    ExposureSeries::from_readings(acc.into_iter().map(|((tr, d), (s, n))| (tr, d, s / n as f64)))
}

/// Reads `cell_id,date,tmax_c` and `cell_id,tract_id` files.
pub fn read_grid<R1: Read, R2: Read>(
    grid: R1,
    membership: R2,
) -> Result<(Vec<(String, NaiveDate, f64)>, HashMap<String, String>), ExposureError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(grid);
    let h = rdr.headers()?.clone();
    let col = |n: &str| h.iter().position(|x| x == n).ok_or_else(|| ExposureError::MissingColumn(n.into()));
    let (ci, di, vi) = (col("cell_id")?, col("date")?, col("tmax_c")?);
    let mut cells = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n as u64 + 2;
        cells.push((
            rec.get(ci).unwrap_or("").to_string(),
            parse_date(rec.get(di).unwrap_or(""), line)?,
            parse_temp(rec.get(vi).unwrap_or(""), line)?,
        ));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(membership);
    let h = rdr.headers()?.clone();
    let col = |n: &str| h.iter().position(|x| x == n).ok_or_else(|| ExposureError::MissingColumn(n.into()));
    let (ci, ti) = (col("cell_id")?, col("tract_id")?);
    let mut members = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        members.insert(rec.get(ci).unwrap_or("").to_string(), rec.get(ti).unwrap_or("").to_string());
    }
    Ok((cells, members))
}

pub fn read_grid_paths(grid: &Path, membership: &Path) -> Result<ExposureSeries, ExposureError> {
    let (cells, members) = read_grid(open(grid)?, open(membership)?)?;
    link_grid_to_tracts(&cells, &members)
}

fn open(path: &Path) -> Result<std::fs::File, ExposureError> {
    std::fs::File::open(path).map_err(|source| ExposureError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_date(s: &str, line: u64) -> Result<NaiveDate, ExposureError> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| ExposureError::MalformedRow {
        line,
        reason: format!("bad date {s:?}: {e}"),
    })
}

fn parse_temp(s: &str, line: u64) -> Result<f64, ExposureError> {
    s.parse::<f64>()
        .ok()
        .filter(|t| t.is_finite())
        .ok_or_else(|| ExposureError::MalformedRow {
            line,
            reason: format!("bad temperature {s:?}"),
        })
}

/// Unweighted mean over tracts with data, per date.
pub fn citywide_series(series: &ExposureSeries) -> BTreeMap<NaiveDate, f64> {
    series
        .citywide
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .map(|(i, &v)| (series.start + chrono::Days::new(i as u64), v))
        .collect()
}

/// Linear-interpolation quantile on order statistics, position
/// `h = (n - 1) q + 1` (1-based). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    let x0 = sorted[lo];
    Some(if lo + 1 < sorted.len() && frac > 0.0 {
        x0 + frac * (sorted[lo + 1] - x0)
    } else {
        x0
    })
}

pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PercentileAnchors {
    pub p50: f64,
    pub p70: f64,
    pub p95: f64,
    pub season_months: BTreeSet<u32>,
    pub first_year: i32,
    pub last_year: i32,
    pub n_days: usize,
    #[serde(skip)]
    sorted: Vec<f64>,
}

impl PercentileAnchors {
    /// Any quantile of the same in-season distribution.
    pub fn quantile(&self, q: f64) -> Option<f64> {
        quantile_sorted(&self.sorted, q)
    }
}

/// Anchors over citywide values in the given months and year range.
pub fn percentile_anchors(
    citywide: &BTreeMap<NaiveDate, f64>,
    season_months: &BTreeSet<u32>,
    years: (i32, i32),
) -> Result<PercentileAnchors, ExposureError> {
    let mut sorted: Vec<f64> = citywide
        .iter()
        .filter(|(d, _)| season_months.contains(&d.month()) && (years.0..=years.1).contains(&d.year()))
        .map(|(_, &v)| v)
        .collect();
    if sorted.is_empty() {
        return Err(ExposureError::Empty);
    }
    sorted.sort_by(f64::total_cmp);
    let q = |p| quantile_sorted(&sorted, p).expect("non-empty");
    Ok(PercentileAnchors {
        p50: q(0.50),
        p70: q(0.70),
        p95: q(0.95),
        season_months: season_months.clone(),
        first_year: years.0,
        last_year: years.1,
        n_days: sorted.len(),
        sorted,
    })
}

/// Extreme-heat day: `tmax >= p95`, or `tmax > p95` when `strict`.
pub fn is_extreme(
    date: NaiveDate,
    citywide: &BTreeMap<NaiveDate, f64>,
    anchors: &PercentileAnchors,
    strict: bool,
) -> Result<bool, ExposureError> {
    let t = *citywide.get(&date).ok_or(ExposureError::NoData(date))?;
    Ok(if strict { t > anchors.p95 } else { t >= anchors.p95 })
}
