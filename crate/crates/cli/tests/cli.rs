use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use dimaf_core::config::RunConfig;
use dimaf_core::explain::{BaselineKind, Shares};
use dimaf_core::train_eval::{write_json, CrossvalReport, EpochStats, ExplainFold, ExplainReport, FoldRecord, Stat};

fn dimaf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dimaf"))
        .args(args)
        .env_remove("DIMAF_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_cohort(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let cfg = dir.join("small.toml");
    std::fs::write(&cfg, format!("[generator]\nn_patients = {n}\n")).unwrap();
    let out = dir.join(format!("cohort{seed}"));
    let o = dimaf(&["generate", "--config", p(&cfg), "--seed", &seed.to_string(), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

const DOCUMENTED: [&str; 9] = [
    "--config",
    "--seed",
    "--folds",
    "--lambda-dis",
    "--lambda-surv",
    "--out",
    "--threads",
    "--help",
    "--version",
];

fn long_flags(help: &str) -> BTreeSet<String> {
    help.lines()
        .map(str::trim_start)
        .filter(|l| l.starts_with('-'))
        .filter_map(|l| l.split(|c: char| c.is_whitespace() || c == ',').find(|w| w.starts_with("--")))
        .map(|w| w.split(['=', '<']).next().unwrap().to_string())
        .collect()
}

#[test]
fn help_enumerates_exactly_the_documented_flags() {
    let o = dimaf(&["--help"]);
    assert!(o.status.success());
    let flags = long_flags(&stdout(&o));
    let expected: BTreeSet<String> = DOCUMENTED.iter().map(|s| s.to_string()).collect();
    assert_eq!(flags, expected);
    for sub in ["generate", "validate", "crossval", "explain", "report"] {
        let o = dimaf(&[sub, "--help"]);
        assert!(o.status.success());
        let flags = long_flags(&stdout(&o));
        for f in &DOCUMENTED[..7] {
            assert!(flags.contains(*f), "{sub} --help lacks {f}");
        }
    }
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(dimaf(&["crossval", "--bogus"]).status.code(), Some(1));
    assert_eq!(dimaf(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn unknown_config_key_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = dimaf(&["generate", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("learning_rate"), "{err}");
    assert!(err.contains("lambda_dis") && err.contains("epochs"), "{err}");
}

#[test]
fn generate_is_deterministic_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[generator]\nn_patients = 30\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(dimaf(&["generate", "--config", p(&cfg), "--seed", "9", "--out", p(out)]).status.success());
    }
    let ha = dimaf_core::manifest::hash_inputs(&a).unwrap();
    let hb = dimaf_core::manifest::hash_inputs(&b).unwrap();
    assert!(ha.len() >= 5);
    assert_eq!(
        ha.iter().map(|f| &f.sha256).collect::<Vec<_>>(),
        hb.iter().map(|f| &f.sha256).collect::<Vec<_>>()
    );
    let o = dimaf(&["validate", "--cohort", p(&a), "--out", p(&dir.path().join("v"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("30 patients"));
}

#[test]
fn validate_rejects_a_broken_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = small_cohort(dir.path(), 12, 1);
    std::fs::write(cohort.join("survival.csv"), "patient_id,time,event\nP00000,-1,1\n").unwrap();
    let o = dimaf(&["validate", "--cohort", p(&cohort), "--out", p(&dir.path().join("v"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn smoke_crossval_explain_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = small_cohort(dir.path(), 20, 0);
    let (o1, o2) = (dir.path().join("run1"), dir.path().join("run2"));
    let before = dimaf_core::manifest::hash_inputs(&cohort).unwrap();
    let start = Instant::now();
    let o = dimaf(&["crossval", "--cohort", p(&cohort), "--folds", "2", "--threads", "1", "--out", p(&o1)]);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(elapsed < 60.0, "smoke run took {elapsed:.1} s");
    let o = dimaf(&["crossval", "--cohort", p(&cohort), "--folds", "2", "--threads", "1", "--out", p(&o2)]);
    assert!(o.status.success());
    for f in [
        "crossval_report.json",
        "crossval_report.csv",
        "explain_report.json",
        "explain_report.csv",
        "fold0_checkpoint.json",
        "fold1_checkpoint.json",
    ] {
        assert_eq!(read(&o1.join(f)), read(&o2.join(f)), "{f} differs between reruns");
    }

    let manifest = String::from_utf8(read(&o1.join("manifest.jsonl"))).unwrap();
    assert_eq!(manifest.lines().count(), 1);
    let m: dimaf_core::manifest::RunManifest = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    assert_eq!(m.status, "ok");
    assert_eq!(m.seed, Some(0));
    assert!(!m.inputs.is_empty() && m.outputs.len() == 6);

    let (e1, e2) = (dir.path().join("explain1"), dir.path().join("explain2"));
    for e in [&e1, &e2] {
        let o = dimaf(&["explain", "--checkpoint", p(&o1), "--cohort", p(&cohort), "--out", p(e), "--assignments"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(read(&e1.join("explain_report.json")), read(&e2.join("explain_report.json")));
    // Shares from the checkpoints match those computed during training.
    assert_eq!(read(&e1.join("explain_report.csv")), read(&o1.join("explain_report.csv")));

    let csv = String::from_utf8(read(&e1.join("explain_report.csv"))).unwrap();
    for line in csv.lines().skip(1).filter(|l| !l.starts_with("std")) {
        let v: Vec<f64> = line.split(',').skip(2).take(6).map(|x| x.parse().unwrap()).collect();
        assert!((v[..4].iter().sum::<f64>() - 1.0).abs() < 1e-9, "{line}");
        assert!((v[4] + v[5] - 1.0).abs() < 1e-9, "{line}");
    }
    let assign = std::fs::read_dir(e1.join("assignments/fold0")).unwrap().count();
    assert!(assign > 0);

    assert_eq!(dimaf_core::manifest::hash_inputs(&cohort).unwrap(), before, "inputs were modified");

    let r = dir.path().join("rendered");
    let o = dimaf(&[
        "report",
        p(&o1.join("crossval_report.json")),
        p(&e1.join("explain_report.json")),
        "--out",
        p(&r),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).as_bytes(), read(&r.join("report.txt")).as_slice());
    assert!(r.join("0_dimaf_loss.svg").exists() && r.join("0_dimaf_dc.svg").exists());
}

#[test]
fn ablation_flag_selects_the_nodis_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = small_cohort(dir.path(), 20, 2);
    let out = dir.path().join("abl");
    let o = dimaf(&["crossval", "--cohort", p(&cohort), "--folds", "2", "--lambda-dis", "0", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: CrossvalReport = serde_json::from_slice(&read(&out.join("crossval_report.json"))).unwrap();
    assert_eq!(report.variant, "DIMAF-nodis");
    assert_eq!(report.lambda_dis, 0.0);
    assert!(report.folds.iter().all(|f| f.history.iter().all(|h| h.dis == 0.0)));
}

#[test]
fn failing_run_exits_nonzero_and_records_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = small_cohort(dir.path(), 20, 3);
    let cfg = dir.path().join("big.toml");
    // More prototypes than patches per slide.
    std::fs::write(&cfg, "[model]\nn_prototypes = 500\n").unwrap();
    let out = dir.path().join("fail");
    let o = dimaf(&["crossval", "--cohort", p(&cohort), "--folds", "2", "--config", p(&cfg), "--out", p(&out)]);
    assert_ne!(o.status.code(), Some(0));
    let manifest = String::from_utf8(read(&out.join("manifest.jsonl"))).unwrap();
    assert!(manifest.contains("\"status\":\"failed"));
}

#[test]
fn explain_rejects_a_foreign_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = small_cohort(dir.path(), 20, 4);
    let out = dir.path().join("run");
    assert!(dimaf(&["crossval", "--cohort", p(&cohort), "--folds", "2", "--out", p(&out)]).status.success());
    let cfg = dir.path().join("other.toml");
    std::fs::write(&cfg, "[generator]\nn_patients = 20\nn_genes = 60\n").unwrap();
    let other = dir.path().join("other");
    assert!(dimaf(&["generate", "--config", p(&cfg), "--out", p(&other)]).status.success());
    let o = dimaf(&["explain", "--checkpoint", p(&out), "--cohort", p(&other), "--out", p(&dir.path().join("e"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("version mismatch"), "{}", stderr(&o));
}

fn fixture_reports(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let record = |fold: usize, c: f64, dc: f64| FoldRecord {
        fold,
        n_train: 50,
        n_test: 50,
        c_index: c,
        clinical_c_index: Some(0.55 + 0.01 * fold as f64),
        d1: dc / 2.0,
        d2: dc / 2.0 + 0.05,
        dc_total: dc + 0.05,
        history: (1..=3)
            .map(|e| EpochStats {
                epoch: e,
                surv: 4.0 - e as f64 * 0.5,
                dis: 1.0 / e as f64,
                d1: 0.5 / e as f64,
                d2: 0.5 / e as f64,
                total: 4.0 - e as f64 * 0.5 + 7.0 / e as f64,
            })
            .collect(),
        checkpoint: Some(format!("fold{fold}_checkpoint.json")),
    };
    let mut cfg = RunConfig::default();
    let full = CrossvalReport::new(&cfg, 100, vec![record(0, 0.71, 0.4), record(1, 0.66, 0.5), record(2, 0.69, 0.45)]);
    cfg.train.lambda_dis = 0.0;
    let abl = CrossvalReport::new(&cfg, 100, vec![record(0, 0.7, 0.8), record(1, 0.64, 0.9), record(2, 0.67, 0.85)]);
    let shares = |b: [f64; 4]| Shares {
        blocks: b,
        specific: b[0] + b[1],
        shared: b[2] + b[3],
        n_patients: 50,
        n_excluded: 0,
    };
    let ex = ExplainReport::new(
        "DIMAF",
        BaselineKind::TrainMean,
        vec![
            ExplainFold { fold: 0, shares: shares([0.125, 0.125, 0.5, 0.25]) },
            ExplainFold { fold: 1, shares: shares([0.25, 0.125, 0.375, 0.25]) },
        ],
    );
    let paths = (dir.join("full.json"), dir.join("abl.json"), dir.join("explain.json"));
    write_json(&paths.0, &full).unwrap();
    write_json(&paths.1, &abl).unwrap();
    write_json(&paths.2, &ex).unwrap();
    paths
}

#[test]
fn report_rendering_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let (full, abl, ex) = fixture_reports(dir.path());
    let o = dimaf(&["report", p(&full), p(&abl), p(&ex), "--out", p(&dir.path().join("r"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/report_golden.txt");
    if std::env::var_os("DIMAF_BLESS").is_some() {
        std::fs::write(&golden, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(&golden).unwrap());

    let table1: Vec<&str> = text.lines().take_while(|l| !l.is_empty()).collect();
    assert_eq!(table1.iter().filter(|l| l.starts_with("DIMAF ")).count(), 1);
    assert_eq!(table1.iter().filter(|l| l.starts_with("DIMAF-nodis ")).count(), 1);
    let mean = Stat::of(&[0.71, 0.66, 0.69]).mean;
    assert!(table1.iter().any(|l| l.starts_with("DIMAF ") && l.contains(&format!("{mean:.4} ±"))));
}

#[test]
fn report_with_old_schema_version_asks_for_migration() {
    let dir = tempfile::tempdir().unwrap();
    let (full, _, _) = fixture_reports(dir.path());
    let text = std::fs::read_to_string(&full).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 0");
    std::fs::write(&full, text).unwrap();
    let o = dimaf(&["report", p(&full), "--out", p(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("regenerate the report"), "{}", stderr(&o));
}

#[test]
fn out_dir_defaults_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[generator]\nn_patients = 10\n").unwrap();
    let target = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_dimaf"))
        .args(["generate", "--config", p(&cfg)])
        .env("DIMAF_OUT_DIR", &target)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(target.join("survival.csv").exists());
}
