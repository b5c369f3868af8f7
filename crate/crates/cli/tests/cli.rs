use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hwas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hwas")).args(args).output().unwrap()
}

fn write_small_config(dir: &Path) -> String {
    let path = dir.join("synth.toml");
    fs::write(
        &path,
        "min_count = 50\nstrat_vars = [\"sex\"]\nsensitivity_variants = [\"sens_i\"]\n\n[synth]\nn_codes = 30\nyears = [2017, 2019]\n\n[[synth.injected]]\nindex = 4\nbaseline = 2.0\nterms = [{ lag = 0, slope = 0.15 }]\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn synth_then_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let seed_cfg = write_small_config(tmp.path());
    let corpus = tmp.path().join("corpus");
    let out = hwas(&["synth", "--config", &seed_cfg, "--out", corpus.to_str().unwrap(), "--seed", "11"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = corpus.join("config.toml");
    assert!(cfg.is_file());

    let run_dir = tmp.path().join("run");
    let out = hwas(&["pipeline", "--config", cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap(), "--workers", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["screening_results.csv", "dlnm_results.csv", "stratified_results.csv", "sensitivity_results.csv", "run_metadata.json"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }

    let out = hwas(&["ingest-check", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report.is_object());
}

#[test]
fn stage_subcommands_honour_variant_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let seed_cfg = write_small_config(tmp.path());
    let corpus = tmp.path().join("corpus");
    assert!(hwas(&["synth", "--config", &seed_cfg, "--out", corpus.to_str().unwrap()]).status.success());
    let cfg = corpus.join("config.toml");
    let run_dir = tmp.path().join("stage2");
    let out = hwas(&["stage2", "--config", cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap(), "--variant", "sens_iii"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(run_dir.join("dlnm_results.csv")).unwrap();
    assert!(text.lines().skip(2).all(|l| l.split(',').nth(1) == Some("sens_iii")));
}

#[test]
fn validation_failures_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "alpha = 2.0\n").unwrap();
    assert_eq!(hwas(&["screen", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(hwas(&["screen", "--variant", "nope"]).status.code(), Some(1));
    let out_dir = tmp.path().join("o");
    assert_eq!(hwas(&["screen", "--out", out_dir.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(hwas(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn help_and_version_succeed() {
    let out = hwas(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["ingest-check", "link-temperature", "screen", "stage2", "stratified", "sensitivity", "pipeline", "synth"] {
        assert!(text.contains(sub), "{sub}");
    }
    assert!(hwas(&["--version"]).status.success());
}
