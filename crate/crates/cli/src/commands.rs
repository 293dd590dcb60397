use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use mishape::anatomy::{
    correct_misalignment, format_subject, generate_cohort, inject_misalignment, reconstruct_subject, slice_sample,
    write_manifest, ClassLabel, ManifestEntry, SubjectFile, SubjectSample,
};
use mishape::harness::{
    cases_csv, encode_subject, input_channels, qualitative_report, results_csv, roc_csv, run_cell, scores_csv,
    task_folds, task_indices, CellResult, ExperimentSpec, FoldResult, Method, TableReport,
};
use mishape::harness::{auroc, roc_curve};
use mishape::pointnet::{grid_search_dropout, ClassifierConfig, LabeledCloud};
use mishape::rng::rng_from;

use crate::config::RunConfig;
use crate::output::Output;
use crate::CliError;

fn open(cfg: &RunConfig, quiet: bool) -> Result<Output, CliError> {
    let out = Output::create(&cfg.output_dir(), quiet)?;
    out.write("config.txt", &cfg.resolved()?.to_text())?;
    Ok(out)
}

/// The cohort a config describes; slice-reconstructed when `input_source=slices`.
pub fn load_cohort(cfg: &RunConfig) -> Result<Vec<SubjectSample>, CliError> {
    let seed = cfg.seed()?;
    let cohort = generate_cohort(&cfg.cohort()?, seed)?;
    if !cfg.slice_input()? {
        return Ok(cohort);
    }
    let acq = cfg.acquisition()?;
    let shift = cfg.shift_std_mm()?;
    let n = cfg.cohort()?.points_per_structure;
    Ok(cohort
        .par_iter()
        .map(|s| {
            let mut rng = rng_from(seed, &[0x511CE, s.subject_id as u64]);
            reconstruct_subject(s, &acq, shift, n, &mut rng)
        })
        .collect::<mishape::Result<Vec<_>>>()?)
}

fn subject_path(s: &SubjectSample) -> String {
    format!("cohort/{}.csv", s.name())
}

fn summary_line(out: &mut String, name: &str, v: &[f64]) {
    if v.is_empty() {
        let _ = writeln!(out, "  {name:<10} n=0");
        return;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let _ = writeln!(out, "  {name:<10} mean {mean:9.4}  sd {sd:8.4}  min {min:9.4}  max {max:9.4}");
}

fn generation_report(cohort: &[SubjectSample]) -> String {
    let mut out = String::from("Generated cohort\n");
    for label in ClassLabel::ALL {
        let group: Vec<&SubjectSample> = cohort.iter().filter(|s| s.label == label).collect();
        let _ = writeln!(out, "{label}: {} subjects", group.len());
        let v = |f: &dyn Fn(&SubjectSample) -> f64| group.iter().map(|s| f(s)).collect::<Vec<_>>();
        let ef = |edv: f64, esv: f64| (edv - esv) / edv;
        summary_line(&mut out, "LV EF", &v(&|s| ef(s.analytic_volumes.lv_edv, s.analytic_volumes.lv_esv)));
        summary_line(&mut out, "RV EF", &v(&|s| ef(s.analytic_volumes.rv_edv, s.analytic_volumes.rv_esv)));
        summary_line(&mut out, "LV EDV ml", &v(&|s| s.analytic_volumes.lv_edv));
        summary_line(&mut out, "LV ESV ml", &v(&|s| s.analytic_volumes.lv_esv));
        summary_line(&mut out, "thickening", &v(&|s| s.thickening));
    }
    let _ = writeln!(out, "total: {} subjects", cohort.len());
    out
}

pub fn generate(cfg: &RunConfig, quiet: bool) -> Result<(), CliError> {
    let out = open(cfg, quiet)?;
    out.log(&format!("generating cohort into {}", out.root().display()));
    let cohort = generate_cohort(&cfg.cohort()?, cfg.seed()?)?;
    let files: Vec<(String, String)> = cohort
        .par_iter()
        .map(|s| (subject_path(s), format_subject(&SubjectFile::from_sample(s))))
        .collect();
    for (path, text) in &files {
        out.write(path, text)?;
    }
    let manifest: Vec<ManifestEntry> = cohort
        .iter()
        .map(|s| ManifestEntry {
            subject_id: s.subject_id,
            label: s.label,
            file: format!("{}.csv", s.name()),
        })
        .collect();
    out.write("cohort/manifest.csv", &write_manifest(&manifest))?;
    out.write("generation_report.txt", &generation_report(&cohort))?;
    out.log(&format!("wrote {} subject files", cohort.len()));
    Ok(())
}

pub fn run(cfg: &RunConfig, quiet: bool) -> Result<(), CliError> {
    let out = open(cfg, quiet)?;
    let harness = cfg.harness()?;
    let cohort = load_cohort(cfg)?;
    out.log(&format!("cohort of {} subjects ready", cohort.len()));
    let mut done: Vec<CellResult> = Vec::new();
    let mut failed = Vec::new();
    for task in cfg.tasks()? {
        let mut rows = Vec::new();
        for spec in cfg.cells(task)? {
            out.log(&format!("cell {} started", spec.cell_id()));
            match run_cell(&spec, &cohort, &harness) {
                Ok(r) => {
                    out.log(&format!("cell {} mean AUROC {:.4}", spec.cell_id(), r.mean_auroc));
                    out.write(&format!("roc/{}.csv", spec.cell_id()), &roc_csv(&r.roc))?;
                    out.write(&format!("scores/{}.csv", spec.cell_id()), &scores_csv(&r))?;
                    rows.push(r);
                }
                Err(e) => {
                    out.log(&format!("cell {} failed: {e}", spec.cell_id()));
                    failed.push(format!("{}: {e}", spec.cell_id()));
                }
            }
        }
        if !rows.is_empty() {
            let table = TableReport { task, rows };
            out.write(&format!("table_{}.txt", task.tag()), &table.render())?;
            if !quiet {
                print!("{}", table.render());
            }
            done.extend(table.rows);
        }
    }
    out.write("results.csv", &results_csv(&done))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Compute(format!("{} cell(s) failed: {}", failed.len(), failed.join("; "))))
    }
}

pub fn align_demo(cfg: &RunConfig, quiet: bool) -> Result<(), CliError> {
    let out = open(cfg, quiet)?;
    let seed = cfg.seed()?;
    let acq = cfg.acquisition()?;
    let shift = cfg.shift_std_mm()?;
    let mut cohort = generate_cohort(&cfg.cohort()?, seed)?;
    cohort.truncate(cfg.align_subjects()?);
    let rows: Vec<Vec<String>> = cohort
        .par_iter()
        .map(|s| -> Result<Vec<String>, CliError> {
            let clean = slice_sample(s, &acq)?;
            let mut rng = rng_from(seed, &[0xA11C, s.subject_id as u64]);
            let shifted = inject_misalignment(&clean, shift, &mut rng)?;
            let fixed = correct_misalignment(&shifted)?;
            Ok(shifted
                .sax
                .iter()
                .enumerate()
                .map(|(k, sl)| {
                    let r = fixed.recovered[k];
                    let err = (sl.shift[0] + r[0]).hypot(sl.shift[1] + r[1]);
                    let tissue: usize = sl.contours.iter().map(|c| c.points.len()).sum();
                    format!(
                        "{},{k},{:.6},{:.6},{:.6},{:.6},{:.6},{:.9},{tissue},{},{}",
                        s.subject_id,
                        sl.z,
                        sl.shift[0],
                        sl.shift[1],
                        -r[0],
                        -r[1],
                        err,
                        fixed.anchor_counts[k],
                        u8::from(fixed.flagged[k])
                    )
                })
                .collect())
        })
        .collect::<Result<_, _>>()?;
    let mut csv = String::from(
        "subject_id,slice,z_mm,injected_x_mm,injected_y_mm,recovered_x_mm,recovered_y_mm,error_mm,contour_points,anchors,flagged\n",
    );
    // slices past the apex or above the base cut no tissue and carry no
    // information; they stay in the CSV but not in the statistics
    let mut errors = Vec::new();
    let mut empty = 0;
    for line in rows.iter().flatten() {
        csv.push_str(line);
        csv.push('\n');
        let f: Vec<&str> = line.split(',').collect();
        if f[8] == "0" {
            empty += 1;
        } else {
            errors.push(f[7].parse::<f64>().unwrap_or(f64::NAN));
        }
    }
    out.write("alignment.csv", &csv)?;
    errors.sort_by(f64::total_cmp);
    let p95 = percentile(&errors, 0.95);
    let flagged = rows
        .iter()
        .flatten()
        .filter(|l| l.ends_with(",1") && l.split(',').nth(8) != Some("0"))
        .count();
    let summary = format!(
        "subjects {}\nslices {}\nslices_without_tissue {empty}\nshift_std_mm {shift}\np95_error_mm {p95:.9}\nmax_error_mm {:.9}\nflagged_slices {flagged}\n",
        cohort.len(),
        errors.len() + empty,
        errors.last().copied().unwrap_or(0.0)
    );
    out.write("alignment_summary.txt", &summary)?;
    out.log(&format!("95th percentile recovery error {p95:.6} mm over {} slices with tissue", errors.len()));
    Ok(())
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Rebuilds a cell's folds from its scores file.
fn read_scores(path: &Path, spec: ExperimentSpec) -> Result<CellResult, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let bad = |line: usize| CliError::Io(format!("{}: malformed line {line}", path.display()));
    let mut folds: BTreeMap<usize, FoldResult> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(i + 1));
        }
        let fold: usize = f[0].parse().map_err(|_| bad(i + 1))?;
        let entry = folds.entry(fold).or_insert_with(|| FoldResult {
            fold_index: fold,
            subject_ids: Vec::new(),
            labels: Vec::new(),
            scores: Vec::new(),
            auroc: 0.0,
            train_size: 0,
            dropout: None,
        });
        entry.subject_ids.push(f[1].parse().map_err(|_| bad(i + 1))?);
        entry.labels.push(f[2].parse().map_err(|_| bad(i + 1))?);
        entry.scores.push(f[3].parse().map_err(|_| bad(i + 1))?);
    }
    if folds.is_empty() {
        return Err(CliError::Io(format!("{}: no scores", path.display())));
    }
    let mut list: Vec<FoldResult> = folds.into_values().collect();
    for f in &mut list {
        f.auroc = auroc(&f.scores, &f.labels)?;
    }
    let all_s: Vec<f64> = list.iter().flat_map(|f| f.scores.clone()).collect();
    let all_y: Vec<f64> = list.iter().flat_map(|f| f.labels.clone()).collect();
    Ok(CellResult {
        spec,
        mean_auroc: list.iter().map(|f| f.auroc).sum::<f64>() / list.len() as f64,
        roc: roc_curve(&all_s, &all_y)?,
        folds: list,
    })
}

pub fn report(cfg: &RunConfig, quiet: bool) -> Result<(), CliError> {
    let dir = cfg.results_dir();
    let out = Output::create(&dir, quiet)?;
    let cohort = load_cohort(cfg)?;
    let n_cases = cfg.n_cases()?;
    let mut reported = 0;
    for task in cfg.tasks()? {
        let mut cells = Vec::new();
        for spec in ExperimentSpec::table(task) {
            let p = dir.join("scores").join(format!("{}.csv", spec.cell_id()));
            if p.exists() {
                cells.push(read_scores(&p, spec)?);
            }
        }
        let chosen = match cfg.report_cell() {
            "best" => {
                let best = |m: Option<Method>| {
                    cells
                        .iter()
                        .filter(|c| m.is_none_or(|m| c.spec.method == m))
                        .max_by(|a, b| a.mean_auroc.total_cmp(&b.mean_auroc))
                };
                best(Some(Method::PointNet)).or_else(|| best(None))
            }
            id => cells.iter().find(|c| c.spec.cell_id() == id),
        };
        let Some(cell) = chosen else {
            continue;
        };
        let rep = qualitative_report(cell, &cohort, n_cases)?;
        let base = format!("report/{}", task.tag());
        out.write(&format!("{base}/cases.csv"), &cases_csv(&rep))?;
        for c in &rep.cases {
            let s = cohort
                .iter()
                .find(|s| s.subject_id == c.subject_id)
                .ok_or_else(|| CliError::Compute(format!("subject {} missing from cohort", c.subject_id)))?;
            let group = if c.label == ClassLabel::Normal { "normal" } else { "mi" };
            let name = format!(
                "{base}/{}_{group}_rank{:03}_{}.csv",
                c.outcome.tag(),
                c.correctness_rank,
                s.name()
            );
            out.write(&name, &format_subject(&SubjectFile::from_sample(s)))?;
        }
        let mut summary = format!(
            "cell {} (mean AUROC {:.4})\n{} cases exported\n",
            cell.spec.cell_id(),
            cell.mean_auroc,
            rep.cases.len()
        );
        for l in &rep.short_groups {
            let _ = writeln!(summary, "warning: fewer than {} validation subjects labelled {l}; all returned", 2 * n_cases);
        }
        out.write(&format!("{base}/summary.txt"), &summary)?;
        out.log(&format!("report for {} from {}: {} cases", task.tag(), cell.spec.cell_id(), rep.cases.len()));
        reported += 1;
    }
    if reported == 0 {
        let wanted = match cfg.report_cell() {
            "best" => "any cell".to_string(),
            id => format!("cell {id}"),
        };
        return Err(CliError::Compute(format!(
            "no per-subject scores for {wanted} in {}; rerun `mishape run --output-dir {}` with the same settings \
             (and `--cells` covering that cell) before `mishape report`",
            dir.join("scores").display(),
            dir.display()
        )));
    }
    Ok(())
}

pub fn grid_search(cfg: &RunConfig, quiet: bool) -> Result<(), CliError> {
    let out = open(cfg, quiet)?;
    let harness = cfg.harness()?;
    let cohort = load_cohort(cfg)?;
    let mut any = false;
    for task in cfg.tasks()? {
        let idx = task_indices(&cohort, task);
        let folds = task_folds(&cohort, &idx, task, &harness)?;
        for spec in cfg.cells(task)?.into_iter().filter(|s| s.method == Method::PointNet) {
            any = true;
            let data: Vec<LabeledCloud> = idx
                .par_iter()
                .map(|&i| {
                    Ok(LabeledCloud {
                        points: encode_subject(
                            &cohort[i],
                            spec.anatomy,
                            spec.phases,
                            harness.points_per_structure,
                            harness.normalization,
                        )?,
                        label: f64::from(cohort[i].label == task.positive()),
                    })
                })
                .collect::<mishape::Result<_>>()?;
            let base = ClassifierConfig {
                input_channels: input_channels(spec.anatomy, spec.phases),
                ..harness.classifier.clone()
            };
            out.log(&format!("grid search for {} over {} settings", spec.cell_id(), harness.dropout_grid.len()));
            let res = grid_search_dropout(&base, &data, &harness.dropout_grid, &folds, &harness.train)?;
            let mut csv = String::from("dropout,");
            csv.push_str(&(0..folds.len()).map(|f| format!("fold{f}")).collect::<Vec<_>>().join(","));
            csv.push_str(",mean_auroc,best\n");
            for (i, s) in res.scores.iter().enumerate() {
                let d: Vec<String> = s.dropout.iter().map(|p| p.to_string()).collect();
                let f: Vec<String> = s.fold_aurocs.iter().map(|a| format!("{a:.6}")).collect();
                let _ = writeln!(csv, "{},{},{:.6},{}", d.join(";"), f.join(","), s.mean_auroc, u8::from(i == res.best_index));
            }
            out.write(&format!("grid/{}.csv", spec.cell_id()), &csv)?;
            out.log(&format!("{}: best dropout {:?}", spec.cell_id(), res.best));
        }
    }
    if !any {
        return Err(CliError::Config("grid-search needs at least one pointnet cell in `cells`".into()));
    }
    Ok(())
}
