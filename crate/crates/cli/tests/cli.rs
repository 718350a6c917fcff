use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use varcurv_cli::{run_experiment, verify_experiment, ExperimentConfig, VerifyStatus, MANIFEST};

fn varcurv(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_varcurv"))
        .args(args)
        .env("VARCURV_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn empty_config_runs_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "empty.toml", "");
    let run = varcurv(&["run", cfg.to_str().unwrap()], dir.path());
    assert!(run.status.success(), "{}", text(&run));
    assert!(dir.path().join("runs/es_run").join(MANIFEST).exists());
    let ver = varcurv(&["verify", cfg.to_str().unwrap()], dir.path());
    assert!(ver.status.success(), "{}", text(&ver));
    assert!(text(&ver).contains("status: PASS"));
}

#[test]
fn invalid_population_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[es]\npopulation = 0\n");
    let out = varcurv(&["run", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("es.population"), "{}", text(&out));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[es]\npopulaton = 8\n");
    let out = varcurv(&["run", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("populaton"), "{}", text(&out));
}

#[test]
fn overrides_reach_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    let out = varcurv(
        &["run", cfg.to_str().unwrap(), "--set", "es.population=8", "--set", "es.horizon=20"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", text(&out));
    let resolved = fs::read_to_string(dir.path().join("runs/es_run/resolved_config.toml")).unwrap();
    let parsed = ExperimentConfig::from_toml(&resolved, &[]).unwrap();
    assert_eq!(parsed.es.population, 8);
    assert_eq!(parsed.es.horizon, 20);
    let bad = varcurv(&["run", cfg.to_str().unwrap(), "--set", "es.horizon=-3"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(text(&bad).contains("es.horizon"), "{}", text(&bad));
}

#[test]
fn resolved_config_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&configs().join("spectroscopy.toml"), &[]).unwrap();
    let first = run_experiment(&cfg, Some(dir.path()), 1).unwrap();
    let resolved = fs::read_to_string(first.output_dir.join("resolved_config.toml")).unwrap();
    let again = ExperimentConfig::from_toml(&resolved, &[]).unwrap();
    let other = tempfile::tempdir().unwrap();
    let second = run_experiment(&again, Some(other.path()), 2).unwrap();
    assert_eq!(first.manifest, second.manifest);
}

#[test]
fn tampered_csv_fails_verification_at_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&configs().join("spectroscopy.toml"), &[]).unwrap();
    let res = run_experiment(&cfg, Some(dir.path()), 1).unwrap();
    let path = res.output_dir.join("curve.csv");
    let body = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = body.lines().map(String::from).collect();
    let mut fields: Vec<String> = lines[3].split(',').map(String::from).collect();
    let last = fields.len() - 1;
    fields[last] = "0.123456".into();
    lines[3] = fields.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let report = verify_experiment(&cfg, Some(dir.path()), 1).unwrap();
    assert_eq!(report.status, VerifyStatus::Fail);
    let details: Vec<String> = report.failed().map(|c| format!("{} {}", c.name, c.detail)).collect();
    assert!(details.iter().any(|d| d.contains("integrity:curve.csv")), "{details:?}");
    assert!(details.iter().any(|d| d.contains("row 2 (line 4)")), "{details:?}");
}

#[test]
fn clss_gate_failure_is_reported_by_design() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(
        &configs().join("clss_double_well.toml"),
        &["clss.seeds=4".into(), "clss.horizon=600".into(), "clss.window=200".into(), "clss.min_valid=2".into()],
    )
    .unwrap();
    let res = run_experiment(&cfg, Some(dir.path()), 1).unwrap();
    assert!(res.fail_by_design);
    let report = verify_experiment(&cfg, Some(dir.path()), 1).unwrap();
    assert_eq!(report.status, VerifyStatus::FailByDesign, "{:?}", report.checks);
}

#[test]
fn verify_without_outputs_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    let out = varcurv(&["verify", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(5));
    assert!(text(&out).contains("missing outputs"), "{}", text(&out));
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = varcurv(&["run", "does/not/exist.toml"], dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn list_experiments_names_every_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = varcurv(&["list-experiments"], dir.path());
    assert!(out.status.success());
    let t = text(&out);
    for kind in ["es_run", "ou_compare", "spectroscopy", "clss", "slq_metrics", "double_well", "best_of_n"] {
        assert!(t.contains(kind), "{kind} missing from {t}");
    }
}

#[test]
fn shipped_configs_parse() {
    for entry in fs::read_dir(configs()).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&p, &[]).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        }
    }
}
