//! End-to-end orchestration: input loading, stage runs, CSV and metadata
//! writers, and bundle hash validation.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::crossover::{
    run_sensitivity, run_stage2, run_stratified, AnalysisVariant, CodeResult, MissingTractPolicy, SensitivityRow,
    Stage2Context, StratifiedResult,
};
use crate::dlnm::standard_contrasts;
use crate::exposure::{
    citywide_series, is_extreme, percentile_anchors, read_grid_paths, ExposureError, ExposureSeries, PercentileAnchors,
};
use crate::ingest::{
    parse_visits_path, read_holidays_path, summarize, CorpusSummary, DiagnosisCategory, DropCounts, GemTable,
    IngestError, VisitRecord,
};
use crate::screening::{manhattan, screen, ScreeningError, ScreeningResult, SeasonCalendar};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Exposure(#[from] ExposureError),
    #[error(transparent)]
    Screening(#[from] ScreeningError),
    #[error("missing input: {0}")]
    MissingInput(&'static str),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: config hash {found} does not match bundle hash {expected}")]
    BundleHashMismatch { file: String, found: String, expected: String },
    #[error("{0}")]
    Internal(String),
}

impl PipelineError {
    /// Errors caused by bad inputs or configuration rather than a defect.
    pub fn is_validation(&self) -> bool {
        match self {
            Self::Config(_) | Self::Ingest(_) | Self::MissingInput(_) | Self::BundleHashMismatch { .. } => true,
            Self::Exposure(_) => true,
            Self::Screening(ScreeningError::Exposure(_)) => true,
            Self::Screening(ScreeningError::Design(_)) => false,
            Self::Io { .. } | Self::Internal(_) => false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `%g`-style formatting with six significant digits; `NA` for NaN.
pub fn fmt_g(x: f64) -> String {
    if x.is_nan() {
        return "NA".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "Inf".into() } else { "-Inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mant), exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn fmt_b(b: bool) -> &'static str {
    if b { "true" } else { "false" }
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub const HASH_PREFIX: &str = "# config_hash=";

/// CSV writer that puts the config hash comment before the header.
fn write_csv(path: &Path, hash: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), PipelineError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut buf = std::io::BufWriter::new(file);
    writeln!(buf, "{HASH_PREFIX}{hash}").map_err(io_err(path))?;
    {
        let mut w = csv::WriterBuilder::new().from_writer(&mut buf);
        let map = |e: csv::Error| PipelineError::Internal(format!("{}: {e}", path.display()));
        w.write_record(header).map_err(map)?;
        for r in rows {
            w.write_record(r).map_err(map)?;
        }
        w.flush().map_err(io_err(path))?;
    }
    buf.flush().map_err(io_err(path))
}

/// Loaded and validated inputs.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub visits: Vec<VisitRecord>,
    pub dropped: DropCounts,
    pub rows_read: u64,
    pub exposure: ExposureSeries,
    pub holidays: HashSet<NaiveDate>,
    pub digests: BTreeMap<String, String>,
}

pub fn load_visits(cfg: &RunConfig) -> Result<(crate::ingest::ParsedVisits, BTreeMap<String, String>), PipelineError> {
    let mut digests = BTreeMap::new();
    let gem = match &cfg.inputs.gem {
        Some(p) => {
            digests.insert("gem".into(), sha256_file(p)?);
            GemTable::from_path(p)?
        }
        None => GemTable::new(),
    };
    let vp = cfg.inputs.visits.as_ref().ok_or(PipelineError::MissingInput("visits"))?;
    digests.insert("visits".into(), sha256_file(vp)?);
    Ok((parse_visits_path(vp, &gem, &cfg.study_filter())?, digests))
}

pub fn load_exposure(cfg: &RunConfig, digests: &mut BTreeMap<String, String>) -> Result<ExposureSeries, PipelineError> {
    match (&cfg.inputs.temperature, &cfg.inputs.grid, &cfg.inputs.membership) {
        (Some(t), _, _) => {
            digests.insert("temperature".into(), sha256_file(t)?);
            Ok(ExposureSeries::from_path(t)?)
        }
        (None, Some(g), Some(m)) => {
            digests.insert("grid".into(), sha256_file(g)?);
            digests.insert("membership".into(), sha256_file(m)?);
            Ok(read_grid_paths(g, m)?)
        }
        _ => Err(PipelineError::MissingInput("temperature (or grid and membership)")),
    }
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs, PipelineError> {
    let (parsed, mut digests) = load_visits(cfg)?;
    let exposure = load_exposure(cfg, &mut digests)?;
    let holidays = match &cfg.inputs.holidays {
        Some(p) => {
            digests.insert("holidays".into(), sha256_file(p)?);
            read_holidays_path(p)?
        }
        None => HashSet::new(),
    };
    Ok(Inputs {
        visits: parsed.visits,
        dropped: parsed.dropped,
        rows_read: parsed.rows_read,
        exposure,
        holidays,
        digests,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Screen,
    Stage2,
    Stratified,
    Sensitivity,
    Pipeline,
}

impl Stage {
    fn wants_stage2(self) -> bool {
        matches!(self, Self::Stage2 | Self::Pipeline)
    }
    fn wants_stratified(self) -> bool {
        matches!(self, Self::Stratified | Self::Pipeline)
    }
    fn wants_sensitivity(self) -> bool {
        matches!(self, Self::Sensitivity | Self::Pipeline)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AnchorSummary {
    pub p50: f64,
    pub p70: f64,
    pub p95: f64,
    pub target_temp: f64,
    pub ref_temp: f64,
    pub n_season_days: usize,
    pub n_extreme_days: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Stage2Drops {
    pub missing_tract: usize,
    pub missing_exposure: usize,
    pub no_controls: usize,
    pub uninformative: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub variant: String,
    pub input_digests: BTreeMap<String, String>,
    pub corpus: CorpusSummary,
    pub rows_read: u64,
    pub dropped_records: DropCounts,
    pub anchors: AnchorSummary,
    pub screening_family_size: usize,
    pub retained_codes: Vec<DiagnosisCategory>,
    pub significant_codes: BTreeMap<String, Vec<DiagnosisCategory>>,
    pub stage2_dropped_strata: BTreeMap<String, Stage2Drops>,
    pub design_decisions: Vec<String>,
    pub outputs: BTreeMap<String, String>,
}

/// Everything one run produced, for callers that want the values.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metadata: RunMetadata,
    pub screening: ScreeningResult,
    pub stage2: BTreeMap<String, Vec<CodeResult>>,
    pub stratified: Vec<StratifiedResult>,
    pub sensitivity: Vec<SensitivityRow>,
}

fn dlnm_rows(results: &[CodeResult], max_lag: usize) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in results {
        let base = |contrast: &str, p: f64, lo: f64, hi: f64| {
            vec![
                r.code.to_string(),
                r.variant.clone(),
                contrast.to_string(),
                fmt_g(p),
                fmt_g(lo),
                fmt_g(hi),
                r.n_strata.to_string(),
                r.n_dropped_strata.to_string(),
                fmt_b(r.stability.is_stable).to_string(),
                fmt_b(r.significant).to_string(),
            ]
        };
        if r.estimates.is_empty() {
            for c in standard_contrasts(max_lag) {
                rows.push(base(&c.to_string(), f64::NAN, f64::NAN, f64::NAN));
            }
        } else {
            for e in &r.estimates {
                rows.push(base(&e.contrast_name, e.point, e.ci_low, e.ci_high));
            }
        }
    }
    rows
}

const DLNM_HEADER: [&str; 10] = [
    "code",
    "variant",
    "contrast",
    "or_point",
    "ci_low",
    "ci_high",
    "n_strata",
    "n_dropped_strata",
    "stable",
    "significant",
];

fn stage2_drops(results: &[CodeResult]) -> Stage2Drops {
    let mut d = Stage2Drops::default();
    for r in results {
        d.missing_tract += r.drops.missing_tract;
        d.missing_exposure += r.drops.missing_exposure;
        d.no_controls += r.drops.no_controls;
        d.uninformative += r.n_dropped_strata - r.drops.total();
    }
    d
}

fn significant(results: &[CodeResult]) -> Vec<DiagnosisCategory> {
    results.iter().filter(|r| r.significant).map(|r| r.code.clone()).collect()
}

/// Runs `stage` on loaded inputs and writes its outputs into `out`.
pub fn run_with_inputs(cfg: &RunConfig, inputs: &Inputs, out: &Path, stage: Stage) -> Result<RunOutput, PipelineError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let hash = cfg.hash();
    let years = cfg.years;
    let citywide = citywide_series(&inputs.exposure);
    let anchors: PercentileAnchors = percentile_anchors(&citywide, &cfg.season_months, years)?;
    let calendar = SeasonCalendar::new(&cfg.season_months, years);
    let p70 = anchors
        .quantile(cfg.screen_p70)
        .ok_or_else(|| PipelineError::Internal("screen percentile".into()))?;
    let n_extreme = calendar
        .days()
        .iter()
        .filter(|d| is_extreme(**d, &citywide, &anchors, cfg.extreme_strict).unwrap_or(false))
        .count();

    let criteria = cfg.criteria();
    let screening = screen(&inputs.visits, &inputs.exposure, p70, &calendar, &inputs.holidays, &criteria)?;
    let retained = screening.retained_codes();
    log::info!(
        "stage 1: {} codes fitted, {} retained",
        screening.family_size,
        retained.len()
    );

    let main = cfg.main_variant();
    let ctx = Stage2Context {
        exposure: &inputs.exposure,
        anchors: &anchors,
        holidays: &inputs.holidays,
        options: &cfg.stage2,
    };

    let mut stage2: BTreeMap<String, Vec<CodeResult>> = BTreeMap::new();
    if stage.wants_stage2() || stage.wants_sensitivity() {
        stage2.insert(main.name.clone(), run_stage2(&retained, &inputs.visits, &ctx, &main));
    }
    let mut sensitivity = Vec::new();
    if stage.wants_sensitivity() {
        let variants: Vec<AnalysisVariant> = cfg.sensitivity_variants();
        for v in &variants {
            if !stage2.contains_key(&v.name) {
                stage2.insert(v.name.clone(), run_stage2(&retained, &inputs.visits, &ctx, v));
            }
        }
        let reference = stage2
            .get("primary")
            .or_else(|| stage2.get(&main.name))
            .cloned()
            .unwrap_or_default();
        let compared: Vec<(String, Vec<CodeResult>)> = variants
            .iter()
            .map(|v| (v.name.clone(), stage2[&v.name].clone()))
            .collect();
        sensitivity = run_sensitivity(&reference, &compared);
    }

    let mut stratified = Vec::new();
    if stage.wants_stratified() {
        let rescreen = |subset: &[VisitRecord]| -> Vec<DiagnosisCategory> {
            screen(subset, &inputs.exposure, p70, &calendar, &inputs.holidays, &criteria)
                .map(|r| r.retained_codes())
                .unwrap_or_default()
        };
        let rescreen_ref: Option<&(dyn Fn(&[VisitRecord]) -> Vec<DiagnosisCategory> + Sync)> =
            cfg.rescreen_within_stratum.then_some(&rescreen);
        for &sv in &cfg.strat_vars {
            stratified.extend(run_stratified(&retained, &inputs.visits, &ctx, &main, sv, rescreen_ref));
        }
    }

    // outputs
    let mut outputs = BTreeMap::new();
    let mut emit = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<(), PipelineError> {
        let path = out.join(name);
        write_csv(&path, &hash, header, &rows)?;
        outputs.insert(name.to_string(), sha256_file(&path)?);
        Ok(())
    };

    let screen_rows: Vec<Vec<String>> = screening
        .rows
        .iter()
        .map(|r| {
            vec![
                r.code.to_string(),
                String::new(),
                fmt_g(r.irr),
                fmt_g(r.ci_low),
                fmt_g(r.ci_high),
                fmt_g(r.raw_p),
                fmt_g(r.adj_p),
                r.total_count.to_string(),
                fmt_g(r.rel_freq_above_p70),
                fmt_b(r.crit_slope).into(),
                fmt_b(r.crit_freq).into(),
                fmt_b(r.crit_count).into(),
                fmt_b(r.retained).into(),
            ]
        })
        .collect();
    emit(
        "screening_results.csv",
        &[
            "code",
            "description",
            "irr",
            "ci_low",
            "ci_high",
            "raw_p",
            "adj_p",
            "count",
            "rel_freq",
            "crit_slope",
            "crit_freq",
            "crit_count",
            "retained",
        ],
        screen_rows,
    )?;
    let man_rows = manhattan(&screening)
        .into_iter()
        .map(|m| {
            vec![
                m.code.to_string(),
                m.chapter.to_string(),
                fmt_g(m.neg_log10_adj_p),
                fmt_b(m.retained).into(),
            ]
        })
        .collect();
    emit("manhattan.csv", &["code", "chapter", "neg_log10_adj_p", "retained"], man_rows)?;

    if !stage2.is_empty() {
        let mut rows = Vec::new();
        // main variant first, then the others in preset order
        let mut names: Vec<&String> = vec![&main.name];
        for v in cfg.sensitivity_variants() {
            if stage.wants_sensitivity() && v.name != main.name {
                names.push(stage2.get_key_value(&v.name).expect("ran").0);
            }
        }
        for n in names {
            let lag = if n == &main.name {
                main.max_lag
            } else {
                AnalysisVariant::preset(n, cfg.first_month()).map(|v| v.max_lag).unwrap_or(main.max_lag)
            };
            rows.extend(dlnm_rows(&stage2[n], lag));
        }
        emit("dlnm_results.csv", &DLNM_HEADER, rows)?;
    }

    if stage.wants_stratified() {
        let mut header: Vec<&str> = vec!["strat_var", "stratum"];
        header.extend(DLNM_HEADER);
        header.push("stability_reason");
        let rows = stratified
            .iter()
            .flat_map(|s| {
                let reason = s.result.error.clone().map_or_else(|| s.result.stability.reason(), |e| {
                    let r = s.result.stability.reason();
                    if r.is_empty() { e } else { format!("{r};{e}") }
                });
                dlnm_rows(std::slice::from_ref(&s.result), main.max_lag)
                    .into_iter()
                    .map(move |row| {
                        let mut v = vec![s.strat_var.to_string(), s.stratum.clone()];
                        v.extend(row);
                        v.push(reason.clone());
                        v
                    })
            })
            .collect();
        emit("stratified_results.csv", &header, rows)?;
    }

    if stage.wants_sensitivity() {
        let join = |c: &[DiagnosisCategory]| c.iter().map(ToString::to_string).collect::<Vec<_>>().join(";");
        let rows = sensitivity
            .iter()
            .map(|s| vec![s.variant.clone(), join(&s.dropped_codes), join(&s.new_codes)])
            .collect();
        emit("sensitivity_results.csv", &["variant", "dropped_codes", "new_codes"], rows)?;
    }

    let target = anchors.quantile(main.target_percentile).unwrap_or(f64::NAN);
    let reference = anchors.quantile(main.ref_percentile).unwrap_or(f64::NAN);
    let mut decisions = vec![
        "percentile estimator: linear interpolation on order statistics, h = (n-1)q + 1".to_string(),
        "percentiles computed on the citywide daily in-season series".to_string(),
        "citywide temperature: unweighted mean over tracts with data".to_string(),
        format!(
            "extreme heat day: tmax {} p95",
            if cfg.extreme_strict { ">" } else { ">=" }
        ),
        format!(
            "stage 1 year adjustment: {}",
            if cfg.continuous_year { "continuous trend" } else { "factor" }
        ),
        "stage 1 p-value: two-sided Wald with quasi-Poisson standard error".to_string(),
        format!(
            "BH family: all codes fitted with at least one in-season visit (m = {})",
            screening.family_size
        ),
        "hot-day condition for relative frequency: tmax > p70".to_string(),
        "visits with missing age kept overall, excluded from age-group strata".to_string(),
        "GEM one-to-many mappings: all target categories kept".to_string(),
    ];
    if !stage2.is_empty() || stage.wants_stratified() {
        decisions.push(match cfg.stage2.missing_tract {
            MissingTractPolicy::Exclude => "visits with missing tract: excluded from stage 2".into(),
            MissingTractPolicy::Citywide => "visits with missing tract: citywide exposure in stage 2".into(),
        });
        decisions.push(format!(
            "stage 2 exposure: {}",
            if cfg.stage2.citywide_exposure {
                "citywide series"
            } else if cfg.stage2.tract_fallback {
                "tract series with citywide fallback"
            } else {
                "tract series"
            }
        ));
        decisions.push("exposure basis boundaries: range of all lagged exposures in each fitted sample".into());
        decisions.push("exposure basis: first B-spline column dropped for identifiability".into());
        decisions.push("lag knots log-spaced from lag 1".into());
        decisions.push("anchors for stage 2 contrasts: citywide percentiles".into());
        decisions.push("separation: |beta| > 50 flagged as divergence".into());
    }
    if (stage.wants_sensitivity() && cfg.sensitivity_variants.iter().any(|v| v == "sens_ii")) || main.name == "sens_ii" {
        decisions.push(format!(
            "fixed 28-day referent tiles anchored at the first Monday of month {}",
            cfg.first_month()
        ));
    }
    if stage.wants_stratified() {
        decisions.push(format!(
            "subgroup code list: {}",
            if cfg.rescreen_within_stratum { "rescreened within stratum" } else { "pooled stage 1 list" }
        ));
        decisions.push("unstable subgroup fits reported with stability flags".into());
    }

    let metadata = RunMetadata {
        config_hash: hash.clone(),
        variant: main.name.clone(),
        input_digests: inputs.digests.clone(),
        corpus: summarize(&inputs.visits),
        rows_read: inputs.rows_read,
        dropped_records: inputs.dropped.clone(),
        anchors: AnchorSummary {
            p50: anchors.p50,
            p70: anchors.p70,
            p95: anchors.p95,
            target_temp: target,
            ref_temp: reference,
            n_season_days: anchors.n_days,
            n_extreme_days: n_extreme,
        },
        screening_family_size: screening.family_size,
        retained_codes: retained,
        significant_codes: stage2.iter().map(|(k, v)| (k.clone(), significant(v))).collect(),
        stage2_dropped_strata: stage2.iter().map(|(k, v)| (k.clone(), stage2_drops(v))).collect(),
        design_decisions: decisions,
        outputs,
    };
    let meta_path = out.join("run_metadata.json");
    let json = serde_json::to_string_pretty(&metadata).map_err(|e| PipelineError::Internal(e.to_string()))?;
    fs::write(&meta_path, json + "\n").map_err(io_err(&meta_path))?;
    validate_bundle(out)?;

    Ok(RunOutput {
        metadata,
        screening,
        stage2,
        stratified,
        sensitivity,
    })
}

/// Loads inputs per the config and runs `stage` with the configured
/// worker count.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, stage: Stage) -> Result<RunOutput, PipelineError> {
    with_workers(cfg.workers, || {
        let inputs = load_inputs(cfg)?;
        run_with_inputs(cfg, &inputs, out, stage)
    })
}

/// Runs `f` on a dedicated pool when a worker count is given.
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match workers {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(e) => {
                log::warn!("thread pool: {e}; using the global pool");
                f()
            }
        },
        None => f(),
    }
}

/// Checks that every CSV in `dir` carries the hash recorded in
/// `run_metadata.json`. Returns that hash.
pub fn validate_bundle(dir: &Path) -> Result<String, PipelineError> {
    let meta_path = dir.join("run_metadata.json");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| PipelineError::Internal(format!("run_metadata.json: {e}")))?;
    let expected = meta["config_hash"]
        .as_str()
        .ok_or_else(|| PipelineError::Internal("run_metadata.json lacks config_hash".into()))?
        .to_string();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    entries.sort();
    for p in entries {
        let f = fs::File::open(&p).map_err(io_err(&p))?;
        let mut first = String::new();
        BufReader::new(f).read_line(&mut first).map_err(io_err(&p))?;
        let Some(found) = first.trim_end().strip_prefix(HASH_PREFIX) else {
            continue;
        };
        if found != expected {
            return Err(PipelineError::BundleHashMismatch {
                file: p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                found: found.to_string(),
                expected,
            });
        }
    }
    Ok(expected)
}

/// Parses visits only and reports the corpus summary.
pub fn ingest_check(cfg: &RunConfig) -> Result<serde_json::Value, PipelineError> {
    let (parsed, digests) = load_visits(cfg)?;
    Ok(serde_json::json!({
        "summary": summarize(&parsed.visits),
        "rows_read": parsed.rows_read,
        "dropped": parsed.dropped,
        "input_digests": digests,
    }))
}

/// Links grid cells to tracts and writes `temperature.csv` and `citywide.csv`.
pub fn link_temperature(cfg: &RunConfig, out: &Path) -> Result<PathBuf, PipelineError> {
    let (Some(g), Some(m)) = (&cfg.inputs.grid, &cfg.inputs.membership) else {
        return Err(PipelineError::MissingInput("grid and membership"));
    };
    let series = read_grid_paths(g, m)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let hash = cfg.hash();
    let mut rows = Vec::new();
    for t in series.tracts() {
        for d in series.start().iter_days().take_while(|d| *d <= series.end()) {
            if let Ok(v) = series.tract_value(t, d) {
                rows.push(vec![d.to_string(), t.clone(), format!("{v}")]);
            }
        }
    }
    rows.sort();
    let path = out.join("temperature.csv");
    write_csv(&path, &hash, &["date", "tract_id", "tmax_c"], &rows)?;
    let city: Vec<Vec<String>> = citywide_series(&series)
        .into_iter()
        .map(|(d, v)| vec![d.to_string(), format!("{v}")])
        .collect();
    write_csv(&out.join("citywide.csv"), &hash, &["date", "tmax_c"], &city)?;
    Ok(path)
}

/// Generates the configured synthetic corpus into `out` together with a
/// `config.toml` that points at it. Returns the config path.
pub fn synth_bundle(cfg: &RunConfig, out: &Path) -> Result<PathBuf, PipelineError> {
    let data = crate::synth::generate_synthetic(&cfg.synth).map_err(|e| ConfigError::Invalid(e))?;
    crate::synth::write_synthetic(&data, out).map_err(io_err(out))?;
    let mut next = cfg.clone();
    next.years = cfg.synth.years;
    next.season_months = cfg.synth.season_months.clone();
    next.workers = None;
    next.inputs = crate::config::InputPaths {
        visits: Some("visits.csv".into()),
        holidays: Some("holidays.csv".into()),
        temperature: Some("temperature.csv".into()),
        ..Default::default()
    };
    let text = toml::to_string(&next).map_err(|e| PipelineError::Internal(e.to_string()))?;
    let path = out.join("config.toml");
    fs::write(&path, text).map_err(io_err(&path))?;
    log::info!("synthetic corpus: {} visits, {} codes", data.visits.len(), data.codes.len());
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g_format() {
        assert_eq!(fmt_g(0.0), "0");
        assert_eq!(fmt_g(1.0), "1");
        assert_eq!(fmt_g(6.15), "6.15");
        assert_eq!(fmt_g(1.0 / 3.0), "0.333333");
        assert_eq!(fmt_g(123456.7), "123457");
        assert_eq!(fmt_g(1234567.0), "1.23457e+06");
        assert_eq!(fmt_g(999999.6), "1e+06");
        assert_eq!(fmt_g(0.0001234567), "0.000123457");
        assert_eq!(fmt_g(0.00001234567), "1.23457e-05");
        assert_eq!(fmt_g(-2.5), "-2.5");
        assert_eq!(fmt_g(f64::NAN), "NA");
        assert_eq!(fmt_g(f64::INFINITY), "Inf");
        assert_eq!(fmt_g(1e-300), "1e-300");
    }
}
