//! Visit, GEM and holiday file parsing; ICD normalisation to 3-character
//! ICD-10 categories; calendar features.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
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
    #[error("ICD-9 code {0:?} has no GEM mapping")]
    UnmappableCode(String),
    #[error("invalid diagnosis code {0:?}")]
    InvalidCode(String),
    #[error("visit {visit_id:?} has conflicting {field} across rows")]
    DuplicateVisitConflict { visit_id: String, field: &'static str },
    #[error("malformed row {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
}

/// Three-character ICD-10 category, e.g. `E86`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DiagnosisCategory(String);

impl DiagnosisCategory {
    pub fn new(code: &str) -> Result<Self, IngestError> {
        let b = code.as_bytes();
        let ok = b.len() == 3
            && b[0].is_ascii_uppercase()
            && b[1..].iter().all(|c| c.is_ascii_digit() || c.is_ascii_uppercase());
        if ok {
            Ok(Self(code.to_string()))
        } else {
            Err(IngestError::InvalidCode(code.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// ICD chapter letter.
    pub fn chapter(&self) -> char {
        self.0.as_bytes()[0] as char
    }
}

impl fmt::Display for DiagnosisCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for DiagnosisCategory {
    type Error = IngestError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::new(&s)
    }
}

impl From<DiagnosisCategory> for String {
    fn from(c: DiagnosisCategory) -> String {
        c.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodeSystem {
    Icd9,
    Icd10,
}

impl FromStr for CodeSystem {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_uppercase().replace(['-', '_'], "").as_str() {
            "ICD9" | "9" => Ok(Self::Icd9),
            "ICD10" | "10" => Ok(Self::Icd10),
            other => Err(format!("unknown code system {other:?}")),
        }
    }
}

fn normalize_code(raw: &str) -> String {
    raw.trim().replace('.', "").to_ascii_uppercase()
}

/// ICD-9 → ICD-10 General Equivalence Mapping rows. Codes are stored
/// without dots, uppercased.
#[derive(Debug, Clone, Default)]
pub struct GemTable {
    rows: BTreeMap<String, Vec<String>>,
}

impl GemTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, icd9: &str, icd10: &str) {
        let (k, v) = (normalize_code(icd9), normalize_code(icd10));
        if k.is_empty() || v.is_empty() {
            return;
        }
        let targets = self.rows.entry(k).or_default();
        if !targets.contains(&v) {
            targets.push(v);
        }
    }

    pub fn lookup(&self, icd9: &str) -> Option<&[String]> {
        self.rows.get(&normalize_code(icd9)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Reads `icd9,icd10` rows.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, IngestError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| IngestError::MissingColumn(name.into()))
        };
        let (i9, i10) = (col("icd9")?, col("icd10")?);
        let mut gem = Self::new();
        for rec in rdr.records() {
            let rec = rec?;
            gem.insert(rec.get(i9).unwrap_or(""), rec.get(i10).unwrap_or(""));
        }
        Ok(gem)
    }

    pub fn from_path(path: &Path) -> Result<Self, IngestError> {
        Self::from_reader(open(path)?)
    }
}

fn open(path: &Path) -> Result<std::fs::File, IngestError> {
    std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Normalises one raw code to its ICD-10 categories.
pub fn map_diagnosis(
    raw_code: &str,
    system: CodeSystem,
    gem: Option<&GemTable>,
) -> Result<BTreeSet<DiagnosisCategory>, IngestError> {
    let code = normalize_code(raw_code);
    if code.is_empty() {
        return Err(IngestError::InvalidCode(raw_code.to_string()));
    }
    let targets: Vec<String> = match system {
        CodeSystem::Icd10 => vec![code],
        CodeSystem::Icd9 => gem
            .and_then(|g| g.lookup(&code))
            .ok_or_else(|| IngestError::UnmappableCode(raw_code.to_string()))?
            .to_vec(),
    };
    targets
        .iter()
        .map(|t| DiagnosisCategory::new(t.get(..3).unwrap_or(t)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
    Other,
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RaceEthnicity {
    Asian,
    BlackOrAfricanAmerican,
    White,
    Other,
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    Central,
    North,
    Northwest,
    South,
    Southwest,
    FarSouth,
    West,
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeGroup {
    Age18To24,
    Age25To44,
    Age45To64,
    Age65Plus,
}

impl AgeGroup {
    pub fn of(age: u32) -> Option<Self> {
        match age {
            0..=17 => None,
            18..=24 => Some(Self::Age18To24),
            25..=44 => Some(Self::Age25To44),
            45..=64 => Some(Self::Age45To64),
            _ => Some(Self::Age65Plus),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Age18To24 => "18-24",
            Self::Age25To44 => "25-44",
            Self::Age45To64 => "45-64",
            Self::Age65Plus => "65+",
        }
    }
}

fn token(s: &str) -> String {
    s.trim()
        .to_ascii_lowercase()
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect()
}

impl FromStr for Sex {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match token(s).as_str() {
            "female" | "f" => Ok(Self::Female),
            "male" | "m" => Ok(Self::Male),
            "other" => Ok(Self::Other),
            "" | "missing" | "unknown" => Ok(Self::Missing),
            _ => Err(format!("bad sex token {s:?}")),
        }
    }
}

impl FromStr for RaceEthnicity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match token(s).as_str() {
            "asian" => Ok(Self::Asian),
            "blackorafricanamerican" | "black" => Ok(Self::BlackOrAfricanAmerican),
            "white" => Ok(Self::White),
            "other" => Ok(Self::Other),
            "" | "missing" | "unknown" => Ok(Self::Missing),
            _ => Err(format!("bad race_ethnicity token {s:?}")),
        }
    }
}

impl FromStr for Region {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match token(s).as_str() {
            "central" => Ok(Self::Central),
            "north" => Ok(Self::North),
            "northwest" => Ok(Self::Northwest),
            "south" => Ok(Self::South),
            "southwest" => Ok(Self::Southwest),
            "farsouth" => Ok(Self::FarSouth),
            "west" | "westside" => Ok(Self::West),
            "" | "missing" | "unknown" => Ok(Self::Missing),
            _ => Err(format!("bad region token {s:?}")),
        }
    }
}

macro_rules! display_as_debug {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                fmt::Debug::fmt(self, f)
            }
        }
    )*};
}
display_as_debug!(Sex, RaceEthnicity, Region);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub visit_id: String,
    pub patient_id: String,
    pub date: NaiveDate,
    pub tract_id: Option<String>,
    pub age_years: Option<u32>,
    pub sex: Sex,
    pub race_ethnicity: RaceEthnicity,
    pub region: Region,
    pub codes: BTreeSet<DiagnosisCategory>,
}

impl VisitRecord {
    pub fn age_group(&self) -> Option<AgeGroup> {
        self.age_years.and_then(AgeGroup::of)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DayOfWeek {
    Mon,
    Tue,
    Wed,
    Thu,
    Fri,
    Sat,
    Sun,
}

impl From<Weekday> for DayOfWeek {
    fn from(w: Weekday) -> Self {
        match w {
            Weekday::Mon => Self::Mon,
            Weekday::Tue => Self::Tue,
            Weekday::Wed => Self::Wed,
            Weekday::Thu => Self::Thu,
            Weekday::Fri => Self::Fri,
            Weekday::Sat => Self::Sat,
            Weekday::Sun => Self::Sun,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CalendarFeatures {
    pub year: i32,
    pub month: u32,
    pub day_of_week: DayOfWeek,
    pub is_holiday: bool,
}

pub fn calendar_features(date: NaiveDate, holidays: &HashSet<NaiveDate>) -> CalendarFeatures {
    CalendarFeatures {
        year: date.year(),
        month: date.month(),
        day_of_week: date.weekday().into(),
        is_holiday: holidays.contains(&date),
    }
}

/// Reads a one-column `date` holiday file.
pub fn read_holidays<R: Read>(reader: R) -> Result<HashSet<NaiveDate>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let i = headers
        .iter()
        .position(|h| h == "date")
        .ok_or_else(|| IngestError::MissingColumn("date".into()))?;
    let mut out = HashSet::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let raw = rec.get(i).unwrap_or("");
        let d = NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|e| IngestError::MalformedRow {
            line: n as u64 + 2,
            reason: format!("bad holiday date {raw:?}: {e}"),
        })?;
        out.insert(d);
    }
    Ok(out)
}

pub fn read_holidays_path(path: &Path) -> Result<HashSet<NaiveDate>, IngestError> {
    read_holidays(open(path)?)
}

/// Inclusion filters applied while parsing visits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyFilter {
    pub season_months: BTreeSet<u32>,
    pub first_year: i32,
    pub last_year: i32,
    pub min_age: u32,
    /// Keep visits whose age is missing (they are still excluded from
    /// age-stratified analyses).
    pub keep_missing_age: bool,
}

impl Default for StudyFilter {
    fn default() -> Self {
        Self {
            season_months: (5..=9).collect(),
            first_year: 2011,
            last_year: 2023,
            min_age: 18,
            keep_missing_age: true,
        }
    }
}

impl StudyFilter {
    pub fn in_season(&self, date: NaiveDate) -> bool {
        self.season_months.contains(&date.month()) && (self.first_year..=self.last_year).contains(&date.year())
    }
}

/// Row and visit rejection counts by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DropCounts {
    pub malformed_rows: u64,
    pub unmappable_codes: u64,
    pub out_of_season_rows: u64,
    pub underage_visits: u64,
    pub missing_age_visits: u64,
    pub visits_without_codes: u64,
}

#[derive(Debug, Clone)]
pub struct ParsedVisits {
    pub visits: Vec<VisitRecord>,
    pub dropped: DropCounts,
    pub rows_read: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusSummary {
    pub n_visits: usize,
    pub n_patients: usize,
    pub n_categories: usize,
    pub n_missing_tract: usize,
}

pub fn summarize(visits: &[VisitRecord]) -> CorpusSummary {
    let patients: HashSet<&str> = visits.iter().map(|v| v.patient_id.as_str()).collect();
    let cats: HashSet<&DiagnosisCategory> = visits.iter().flat_map(|v| v.codes.iter()).collect();
    CorpusSummary {
        n_visits: visits.len(),
        n_patients: patients.len(),
        n_categories: cats.len(),
        n_missing_tract: visits.iter().filter(|v| v.tract_id.is_none()).count(),
    }
}

const VISIT_COLUMNS: [&str; 10] = [
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
];

fn nullable(s: &str) -> Option<String> {
    let s = s.trim();
    (!s.is_empty()).then(|| s.to_string())
}

/// Parses long-format visit rows (one row per visit–code pair), merging
/// rows by `visit_id` in order of first appearance.
pub fn parse_visits<R: Read>(reader: R, gem: &GemTable, filter: &StudyFilter) -> Result<ParsedVisits, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 10];
    for (slot, name) in idx.iter_mut().zip(VISIT_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.into()))?;
    }

    let mut dropped = DropCounts::default();
    let mut order: Vec<VisitRecord> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut rows_read = 0u64;

    for (n, rec) in rdr.records().enumerate() {
        rows_read += 1;
        let line = n as u64 + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                log::warn!("row {line}: {e}");
                dropped.malformed_rows += 1;
                continue;
            }
        };
        let field = |k: usize| rec.get(idx[k]).unwrap_or("");
        let parsed = (|| -> Result<(VisitRecord, String, CodeSystem), String> {
            let visit_id = nullable(field(0)).ok_or("empty visit_id")?;
            let patient_id = nullable(field(1)).ok_or("empty patient_id")?;
            let date = NaiveDate::parse_from_str(field(2), "%Y-%m-%d").map_err(|e| format!("bad date: {e}"))?;
            let age_years = match nullable(field(4)) {
                None => None,
                Some(a) => Some(a.parse::<u32>().map_err(|_| format!("bad age {a:?}"))?),
            };
            let code = nullable(field(8)).ok_or("empty code")?;
            let system: CodeSystem = field(9).parse()?;
            Ok((
                VisitRecord {
                    visit_id,
                    patient_id,
                    date,
                    tract_id: nullable(field(3)),
                    age_years,
                    sex: field(5).parse()?,
                    race_ethnicity: field(6).parse()?,
                    region: field(7).parse()?,
                    codes: BTreeSet::new(),
                },
                code,
                system,
            ))
        })();
        let (visit, code, system) = match parsed {
            Ok(v) => v,
            Err(reason) => {
                log::warn!("row {line}: {reason}");
                dropped.malformed_rows += 1;
                continue;
            }
        };
        if !filter.in_season(visit.date) {
            dropped.out_of_season_rows += 1;
            continue;
        }
        let cats = match map_diagnosis(&code, system, Some(gem)) {
            Ok(c) => c,
            Err(IngestError::UnmappableCode(c)) => {
                log::warn!("row {line}: ICD-9 code {c:?} has no GEM row; code dropped");
                dropped.unmappable_codes += 1;
                BTreeSet::new()
            }
            Err(e) => {
                log::warn!("row {line}: {e}");
                dropped.malformed_rows += 1;
                continue;
            }
        };
        match by_id.get(&visit.visit_id) {
            Some(&i) => {
                let existing = &mut order[i];
                let conflict = if existing.patient_id != visit.patient_id {
                    Some("patient_id")
                } else if existing.date != visit.date {
                    Some("date")
                } else if existing.tract_id != visit.tract_id {
                    Some("tract_id")
                } else if existing.age_years != visit.age_years {
                    Some("age_years")
                } else if existing.sex != visit.sex {
                    Some("sex")
                } else if existing.race_ethnicity != visit.race_ethnicity {
                    Some("race_ethnicity")
                } else if existing.region != visit.region {
                    Some("region")
                } else {
                    None
                };
                if let Some(field) = conflict {
                    return Err(IngestError::DuplicateVisitConflict {
                        visit_id: visit.visit_id,
                        field,
                    });
                }
                existing.codes.extend(cats);
            }
            None => {
                let mut v = visit;
                v.codes = cats;
                by_id.insert(v.visit_id.clone(), order.len());
                order.push(v);
            }
        }
    }

    let mut visits = Vec::with_capacity(order.len());
    for v in order {
        match v.age_years {
            Some(a) if a < filter.min_age => dropped.underage_visits += 1,
            None if !filter.keep_missing_age => dropped.missing_age_visits += 1,
            _ if v.codes.is_empty() => dropped.visits_without_codes += 1,
            _ => visits.push(v),
        }
    }
    Ok(ParsedVisits {
        visits,
        dropped,
        rows_read,
    })
}

pub fn parse_visits_path(path: &Path, gem: &GemTable, filter: &StudyFilter) -> Result<ParsedVisits, IngestError> {
    parse_visits(open(path)?, gem, filter)
}
