use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mishape::anatomy::{format_subject, read_subject};
use mishape_cli::RunConfig;

const SMALL_NET: &[&str] = &[
    "--encoder-widths",
    "8,16",
    "--head-widths",
    "8,1",
    "--input-tnet",
    "false",
    "--feature-tnet",
    "false",
    "--epochs",
    "2",
    "--learning-rate",
    "1e-3",
    "--dropout-grid",
    "0.1",
    "--train-points-per-structure",
    "32",
];

fn mishape(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mishape"));
    c.arg(cmd).arg("--quiet").arg("--jobs").arg("2").arg("--output-dir").arg(out);
    c.args(extra);
    c.env_remove("MISHAPE_OUTPUT_ROOT");
    c.output().unwrap()
}

fn small_cohort(n: usize, p: usize, i: usize) -> Vec<String> {
    [
        "--n-normal",
        &n.to_string(),
        "--n-prevalent",
        &p.to_string(),
        "--n-incident",
        &i.to_string(),
        "--points-per-structure",
        "512",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn args<'a>(a: &'a [String], b: &[&'a str]) -> Vec<&'a str> {
    a.iter().map(String::as_str).chain(b.iter().copied()).collect()
}

/// Every file under `root` except the timestamped log.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.log" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn default_config_describes_full_cohort() {
    let cfg = RunConfig::default();
    let c = cfg.cohort().unwrap();
    assert_eq!(c.n_normal + c.n_prevalent + c.n_incident, 1068);
    assert_eq!((c.n_normal, c.n_prevalent, c.n_incident), (539, 294, 235));
}

#[test]
fn generate_writes_requested_subjects_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let only_normals = ["--n-normal", "3", "--n-prevalent", "0", "--n-incident", "0", "--points-per-structure", "64"];
    for d in [&a, &b] {
        let o = mishape("generate", d, &only_normals);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let subjects = fs::read_dir(a.join("cohort"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("subject_"))
        .count();
    assert_eq!(subjects, 3);
    let report = fs::read_to_string(a.join("generation_report.txt")).unwrap();
    assert!(report.contains("normal: 3 subjects"));
    assert!(fs::read_to_string(a.join("config.txt")).unwrap().contains("n_normal=3"));
    assert!(a.join("run.log").exists());
    assert_eq!(snapshot(&a), snapshot(&b));

    let other = dir.path().join("c");
    let o = mishape("generate", &other, &[&only_normals[..], &["--seed", "1"]].concat());
    assert!(o.status.success());
    assert_ne!(snapshot(&a), snapshot(&other));
}

#[test]
fn unknown_keys_abort_with_config_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = mishape("run", &out, &["--n-normal", "3", "--no-such-key", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no-such-key"));
    assert!(!out.exists());

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed=1\nmystery=2\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mishape"))
        .args(["generate", "--quiet", "--config"])
        .arg(&cfg)
        .arg("--output-dir")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn output_root_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mishape"))
        .args(["generate", "--quiet", "--n-normal", "1", "--n-prevalent", "0", "--n-incident", "0"])
        .env("MISHAPE_OUTPUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("cohort/subject_00000.csv").exists());
}

#[test]
fn single_cell_selection_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_cohort(8, 8, 0);
    let o = mishape("run", dir.path(), &args(&c, &["--task", "prevalent", "--cells", "LV,ES,regression"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert!(rows.iter().all(|r| r.starts_with("prevalent,LV,ES,regression,")));
    assert_eq!(rows.iter().filter(|r| r.contains(",mean,")).count(), 1);
    let table = fs::read_to_string(dir.path().join("table_prevalent.txt")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("LV")).count(), 1);
    assert!(dir.path().join("roc/prevalent_lv_es_regression.csv").exists());
    assert!(!dir.path().join("table_incident.txt").exists());
}

#[test]
fn full_prevalent_table_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_cohort(8, 8, 0);
    let a = args(&c, &[&["--task", "prevalent", "--cells", "all"], SMALL_NET].concat());
    let (x, y) = (dir.path().join("x"), dir.path().join("y"));
    for d in [&x, &y] {
        let o = mishape("run", d, &a);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let csv = fs::read_to_string(x.join("results.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",mean,")).count(), 8);
    let roc = fs::read_to_string(x.join("roc/prevalent_lvrv_edes_pointnet.csv")).unwrap();
    assert!(roc.starts_with("threshold,tpr,fpr\n"));
    assert_eq!(snapshot(&x), snapshot(&y));
}

#[test]
fn failing_cells_set_exit_code_but_keep_other_results() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_cohort(8, 8, 0);
    // the network asks for more points than the surfaces carry
    let mut a = args(&c, &[&["--task", "prevalent"], SMALL_NET].concat());
    let at = a.iter().position(|s| *s == "--train-points-per-structure").unwrap();
    a[at + 1] = "4096";
    let o = mishape("run", dir.path(), &a);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("prevalent_lv_es_pointnet"));
    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",mean,")).count(), 4);
    assert!(csv.lines().skip(1).all(|l| l.contains("regression")));
}

#[test]
fn align_demo_without_shift_recovers_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let o = mishape("align-demo", dir.path(), &["--align-subjects", "4", "--shift-std-mm", "0", "--sax-count", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("alignment.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4 * 8);
    for r in &rows {
        assert!(r[7].parse::<f64>().unwrap() < 1e-9);
    }
}

#[test]
fn align_demo_recovers_default_shifts() {
    let dir = tempfile::tempdir().unwrap();
    let o = mishape("align-demo", dir.path(), &["--align-subjects", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(dir.path().join("alignment_summary.txt")).unwrap();
    let p95: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("p95_error_mm "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(p95 < 0.5, "{summary}");
    let rows = fs::read_to_string(dir.path().join("alignment.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows, 10 * 10);
}

#[test]
fn report_exports_eight_cases_that_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let c = small_cohort(10, 10, 0);
    let a = args(&c, &[&["--task", "prevalent", "--cells", "LV,ES,pointnet;LV,ES,regression"], SMALL_NET].concat());
    let o = mishape("report", &run, &[]);
    assert_eq!(o.status.code(), Some(2), "report before run must fail on the missing config");
    let o = mishape("run", &run, &a);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::remove_file(run.join("scores/prevalent_lv_es_pointnet.csv")).unwrap();
    fs::remove_file(run.join("scores/prevalent_lv_es_regression.csv")).unwrap();
    let o = mishape("report", &run, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("rerun `mishape run"));

    let o = mishape("run", &run, &a);
    assert!(o.status.success());
    let o = mishape("report", &run, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep = run.join("report/prevalent");
    let cases = fs::read_to_string(rep.join("cases.csv")).unwrap();
    let header: Vec<&str> = cases.lines().next().unwrap().split(',').collect();
    assert!(header.contains(&"ef") && header.contains(&"min_thickening_ratio"));
    assert_eq!(cases.lines().count(), 1 + 8);
    let summary = fs::read_to_string(rep.join("summary.txt")).unwrap();
    assert!(summary.contains("prevalent_lv_es_pointnet"));

    let gen = dir.path().join("gen");
    assert!(mishape("generate", &gen, &args(&c, &[])).status.success());
    let exports: Vec<PathBuf> = fs::read_dir(&rep)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().contains("subject_"))
        .collect();
    assert_eq!(exports.len(), 8);
    for p in exports {
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        let subject = &name[name.find("subject_").unwrap()..];
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, fs::read_to_string(gen.join("cohort").join(subject)).unwrap());
        let parsed = read_subject(&p).unwrap();
        assert_eq!(format_subject(&parsed), text);
    }
}

#[test]
fn grid_search_writes_one_table_per_network_cell() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_cohort(8, 8, 0);
    let mut a = args(&c, &[&["--task", "prevalent", "--cells", "LV,ES,pointnet;LV,ES,regression"], SMALL_NET].concat());
    let at = a.iter().position(|s| *s == "--dropout-grid").unwrap();
    a[at + 1] = "0,0.5";
    let o = mishape("grid-search", dir.path(), &a);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = fs::read_to_string(dir.path().join("grid/prevalent_lv_es_pointnet.csv")).unwrap();
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines.iter().skip(1).filter(|l| l.ends_with(",1")).count(), 1);
    assert_eq!(fs::read_dir(dir.path().join("grid")).unwrap().count(), 1);

    let o = mishape("grid-search", &dir.path().join("none"), &args(&c, &["--cells", "LV,ES,regression"]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn keys_lists_every_documented_setting() {
    let o = Command::new(env!("CARGO_BIN_EXE_mishape")).arg("keys").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for key in ["n-normal", "learning-rate", "dropout-grid", "shift-std-mm", "cells"] {
        assert!(text.contains(key), "{key}");
    }
}
