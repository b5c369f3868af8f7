//! Run configuration: TOML file plus command-line overrides, validation and
//! the canonical configuration hash.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crossover::{AnalysisVariant, ReferentScheme, Stage2Options, StratVar, VARIANT_NAMES};
use crate::ingest::StudyFilter;
use crate::screening::ScreeningCriteria;
use crate::synth::SynthScenario;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferentKind {
    TimeStratifiedMonth,
    Fixed28Day,
}

/// Input file locations; relative paths resolve against the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub visits: Option<PathBuf>,
    pub gem: Option<PathBuf>,
    pub holidays: Option<PathBuf>,
    /// Pre-linked `date,tract_id,tmax_c`.
    pub temperature: Option<PathBuf>,
    /// Grid cells `cell_id,date,tmax_c`, used with `membership`.
    pub grid: Option<PathBuf>,
    pub membership: Option<PathBuf>,
}

impl InputPaths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.visits,
            &mut self.gem,
            &mut self.holidays,
            &mut self.temperature,
            &mut self.grid,
            &mut self.membership,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub season_months: BTreeSet<u32>,
    pub years: (i32, i32),
    pub min_age: u32,
    pub keep_missing_age: bool,
    pub target_percentile: f64,
    pub ref_percentile: f64,
    pub screen_p70: f64,
    pub alpha: f64,
    pub min_count: u64,
    pub min_rel_freq: f64,
    pub use_slope_criterion: bool,
    pub use_freq_criterion: bool,
    pub use_count_criterion: bool,
    pub continuous_year: bool,
    pub max_lag: usize,
    pub exposure_degree: usize,
    pub lag_knots: usize,
    pub referent: ReferentKind,
    /// Name of the main analysis variant; must agree with the settings above
    /// when it names a preset.
    pub variant: Option<String>,
    /// Variants compared in the sensitivity run.
    pub sensitivity_variants: Vec<String>,
    pub strat_vars: Vec<StratVar>,
    pub rescreen_within_stratum: bool,
    pub extreme_strict: bool,
    pub stage2: Stage2Options,
    pub seed: u64,
    /// Worker threads; never affects results and is left out of the hash.
    pub workers: Option<usize>,
    pub inputs: InputPaths,
    pub synth: SynthScenario,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            season_months: (5..=9).collect(),
            years: (2011, 2023),
            min_age: 18,
            keep_missing_age: true,
            target_percentile: 0.95,
            ref_percentile: 0.50,
            screen_p70: 0.70,
            alpha: 0.05,
            min_count: 100,
            min_rel_freq: 0.30,
            use_slope_criterion: true,
            use_freq_criterion: true,
            use_count_criterion: true,
            continuous_year: false,
            max_lag: 3,
            exposure_degree: 2,
            lag_knots: 1,
            referent: ReferentKind::TimeStratifiedMonth,
            variant: None,
            sensitivity_variants: VARIANT_NAMES.iter().map(|s| s.to_string()).collect(),
            strat_vars: StratVar::ALL.to_vec(),
            rescreen_within_stratum: false,
            extreme_strict: false,
            stage2: Stage2Options::default(),
            seed: 20_240_601,
            workers: None,
            inputs: InputPaths::default(),
            synth: SynthScenario::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub variant: Option<String>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.inputs.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Defaults, then the file, then flags.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_path(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(v) = &o.variant {
            let first = self.first_month();
            let preset = AnalysisVariant::preset(v, first).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            self.ref_percentile = preset.ref_percentile;
            self.target_percentile = preset.target_percentile;
            self.exposure_degree = preset.exposure_degree;
            self.max_lag = preset.max_lag;
            self.lag_knots = preset.lag_knots;
            self.referent = match preset.referent {
                ReferentScheme::TimeStratifiedMonth => ReferentKind::TimeStratifiedMonth,
                ReferentScheme::Fixed28Day { .. } => ReferentKind::Fixed28Day,
            };
            self.variant = Some(v.clone());
        }
        if let Some(w) = o.workers {
            self.workers = Some(w);
        }
        if let Some(s) = o.seed {
            self.seed = s;
            self.synth.seed = s;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.season_months.is_empty() || self.season_months.iter().any(|m| !(1..=12).contains(m)) {
            return bad("season_months must be a non-empty subset of 1..=12".into());
        }
        if self.years.0 > self.years.1 {
            return bad(format!("years {:?} out of order", self.years));
        }
        for (name, q) in [
            ("target_percentile", self.target_percentile),
            ("ref_percentile", self.ref_percentile),
            ("screen_p70", self.screen_p70),
            ("alpha", self.alpha),
        ] {
            if !(q > 0.0 && q < 1.0) {
                return bad(format!("{name} = {q} must lie in (0, 1)"));
            }
        }
        if self.ref_percentile >= self.target_percentile {
            return bad("ref_percentile must be below target_percentile".into());
        }
        if !(0.0..=1.0).contains(&self.min_rel_freq) {
            return bad("min_rel_freq must lie in [0, 1]".into());
        }
        if self.exposure_degree < 1 {
            return bad("exposure_degree must be at least 1".into());
        }
        if self.max_lag == 0 && self.lag_knots > 0 {
            return bad("lag_knots must be 0 when max_lag is 0".into());
        }
        for v in self.sensitivity_variants.iter().chain(&self.variant) {
            if !VARIANT_NAMES.contains(&v.as_str()) {
                return bad(format!("unknown variant {v:?}"));
            }
        }
        if let Some(name) = &self.variant {
            if self.main_variant().identify(self.first_month()) != Some(name.as_str()) {
                return bad(format!("variant {name:?} disagrees with the configured model settings"));
            }
        }
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        self.synth.validate().map_err(ConfigError::Invalid)
    }

    pub fn first_month(&self) -> u32 {
        *self.season_months.first().expect("validated non-empty")
    }

    pub fn study_filter(&self) -> StudyFilter {
        StudyFilter {
            season_months: self.season_months.clone(),
            first_year: self.years.0,
            last_year: self.years.1,
            min_age: self.min_age,
            keep_missing_age: self.keep_missing_age,
        }
    }

    pub fn criteria(&self) -> ScreeningCriteria {
        ScreeningCriteria {
            alpha: self.alpha,
            min_count: self.min_count,
            min_rel_freq: self.min_rel_freq,
            use_slope: self.use_slope_criterion,
            use_freq: self.use_freq_criterion,
            use_count: self.use_count_criterion,
            continuous_year: self.continuous_year,
        }
    }

    /// The variant described by the model settings, named after the matching
    /// preset or `custom`.
    pub fn main_variant(&self) -> AnalysisVariant {
        let mut v = AnalysisVariant {
            name: String::new(),
            ref_percentile: self.ref_percentile,
            target_percentile: self.target_percentile,
            exposure_degree: self.exposure_degree,
            max_lag: self.max_lag,
            lag_knots: self.lag_knots,
            referent: match self.referent {
                ReferentKind::TimeStratifiedMonth => ReferentScheme::TimeStratifiedMonth,
                ReferentKind::Fixed28Day => ReferentScheme::Fixed28Day {
                    first_month: self.first_month(),
                },
            },
        };
        v.name = v.identify(self.first_month()).unwrap_or("custom").to_string();
        v
    }

    pub fn sensitivity_variants(&self) -> Vec<AnalysisVariant> {
        self.sensitivity_variants
            .iter()
            .map(|n| AnalysisVariant::preset(n, self.first_month()).expect("validated name"))
            .collect()
    }

    /// SHA-256 of the canonical JSON form, excluding `workers`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(m) = v.as_object_mut() {
            m.remove("workers");
        }
        let canon = canonical_json(&v);
        hex::encode(Sha256::digest(canon.as_bytes()))
    }
}

/// JSON with object keys sorted recursively.
pub fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .iter()
                .map(|k| format!("{}:{}", Value::String((*k).clone()), canonical_json(&m[*k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}
