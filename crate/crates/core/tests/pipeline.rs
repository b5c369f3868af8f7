use std::fs;
use std::path::Path;

use hwas::config::{Overrides, RunConfig};
use hwas::pipeline::{run_pipeline, synth_bundle, validate_bundle, PipelineError, Stage};
use hwas::synth::{generate_synthetic, write_synthetic, EffectTerm, InjectedCode, SynthScenario};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth = SynthScenario {
        n_codes: 40,
        years: (2016, 2019),
        injected: vec![InjectedCode {
            index: 3,
            terms: vec![EffectTerm { lag: 0, slope: 0.15 }],
            baseline: Some(2.0),
        }],
        ..SynthScenario::default()
    };
    cfg.min_count = 50;
    cfg
}

fn bundle(dir: &Path) -> RunConfig {
    let path = synth_bundle(&small_config(), &dir.join("corpus")).unwrap();
    RunConfig::load(Some(&path), &Overrides::default()).unwrap()
}

#[test]
fn synthetic_run_writes_a_consistent_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = bundle(tmp.path());
    let out = tmp.path().join("out");
    let run = run_pipeline(&cfg, &out, Stage::Pipeline).unwrap();
    for f in [
        "screening_results.csv",
        "manhattan.csv",
        "dlnm_results.csv",
        "stratified_results.csv",
        "sensitivity_results.csv",
        "run_metadata.json",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert_eq!(validate_bundle(&out).unwrap(), cfg.hash());
    let screening = fs::read_to_string(out.join("screening_results.csv")).unwrap();
    assert!(screening.starts_with(&format!("# config_hash={}\n", cfg.hash())));
    assert!(run.screening.retained_codes().iter().any(|c| c.as_str() == "A03"));
    assert_eq!(run.stage2.len(), 5);
}

#[test]
fn reruns_are_byte_identical_regardless_of_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = bundle(tmp.path());
    cfg.strat_vars.truncate(1);
    cfg.sensitivity_variants.truncate(1);
    run_pipeline(&cfg, &tmp.path().join("a"), Stage::Pipeline).unwrap();
    cfg.workers = Some(2);
    run_pipeline(&cfg, &tmp.path().join("b"), Stage::Pipeline).unwrap();
    for entry in fs::read_dir(tmp.path().join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = fs::read(tmp.path().join("a").join(&name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(&name)).unwrap();
        assert!(a == b, "{name:?} differs");
    }
}

#[test]
fn tampered_bundle_fails_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = bundle(tmp.path());
    let out = tmp.path().join("out");
    run_pipeline(&cfg, &out, Stage::Screen).unwrap();
    let path = out.join("manhattan.csv");
    let text = fs::read_to_string(&path).unwrap();
    let (_, rest) = text.split_once('\n').unwrap();
    fs::write(&path, format!("# config_hash={}\n{rest}", "0".repeat(64))).unwrap();
    let err = validate_bundle(&out).unwrap_err();
    assert!(matches!(err, PipelineError::BundleHashMismatch { .. }));
    assert!(err.is_validation());
}

#[test]
fn variant_override_relabels_the_main_run() {
    let tmp = tempfile::tempdir().unwrap();
    let path = synth_bundle(&small_config(), &tmp.path().join("corpus")).unwrap();
    let o = Overrides {
        variant: Some("sens_i".into()),
        ..Overrides::default()
    };
    let cfg = RunConfig::load(Some(&path), &o).unwrap();
    assert_eq!(cfg.ref_percentile, 0.7);
    assert_eq!(cfg.main_variant().name, "sens_i");

    let mut custom = cfg.clone();
    custom.variant = None;
    custom.ref_percentile = 0.6;
    assert_eq!(custom.main_variant().name, "custom");

    let mut wrong = cfg;
    wrong.ref_percentile = 0.5;
    assert!(wrong.validate().is_err());
}

#[test]
fn workers_do_not_change_the_hash() {
    let a = RunConfig::default();
    let mut b = a.clone();
    b.workers = Some(3);
    assert_eq!(a.hash(), b.hash());
    b.seed += 1;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(RunConfig::from_toml_str("alpha = 0.05\nbogus = 1\n").is_err());
    let cfg = RunConfig::from_toml_str("alpha = 0.01\nmax_lag = 5\nlag_knots = 2\n").unwrap();
    assert_eq!(cfg.main_variant().name, "sens_iv");
}

#[test]
fn missing_input_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let err = run_pipeline(&RunConfig::default(), &tmp.path().join("out"), Stage::Screen).unwrap_err();
    assert!(err.is_validation(), "{err}");
}

#[test]
fn generator_is_seed_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = small_config().synth;
    for d in ["a", "b"] {
        write_synthetic(&generate_synthetic(&scenario).unwrap(), &tmp.path().join(d)).unwrap();
    }
    for f in ["visits.csv", "temperature.csv", "holidays.csv", "truth.csv"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(f)).unwrap(),
            fs::read(tmp.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let other = generate_synthetic(&SynthScenario { seed: 7, ..scenario.clone() }).unwrap();
    let base = generate_synthetic(&scenario).unwrap();
    assert_ne!(other.visits.len(), 0);
    assert!(other.visits.len() != base.visits.len() || other.readings != base.readings);
}

#[test]
fn truth_matches_the_analytic_effect() {
    let scenario = small_config().synth;
    let data = generate_synthetic(&scenario).unwrap();
    let dp = data.anchors.p95 - data.anchors.p50;
    for row in data.truth.iter().filter(|r| r.code.as_str() == "A03") {
        let expected = match row.contrast.as_str() {
            "lag0" => 0.15 * dp,
            c if c.starts_with("cum0-") => 0.15 * dp,
            _ => 0.0,
        };
        assert!((row.log_or - expected).abs() <= 1e-12, "{row:?}");
    }
}
