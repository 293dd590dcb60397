use std::fmt::Write as _;

use rayon::prelude::*;

use super::folds::{stratified_kfold, Split};
use super::roc::{auroc, roc_curve, RocCurve};
use crate::anatomy::{ClassLabel, Phase, SubjectSample};
use crate::clinical::{
    extract_features, logistic_fit, logistic_predict, InputAnatomy, InputPhases, VolumeEstimator, DEFAULT_RIDGE,
};
use crate::error::{Error, Result};
use crate::pointnet::{
    build_model, grid_search_dropout, predict_many, train_subset, uniform_grid, ClassifierConfig, LabeledCloud, TrainConfig,
};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    /// Prevalent MI against normals.
    Prevalent,
    /// Incident MI against normals.
    Incident,
}

impl Task {
    pub fn tag(self) -> &'static str {
        match self {
            Task::Prevalent => "prevalent",
            Task::Incident => "incident",
        }
    }

    pub fn positive(self) -> ClassLabel {
        match self {
            Task::Prevalent => ClassLabel::PrevalentMi,
            Task::Incident => ClassLabel::IncidentMi,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "prevalent" => Some(Task::Prevalent),
            "incident" => Some(Task::Incident),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Regression,
    PointNet,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Regression => "regression",
            Method::PointNet => "pointnet",
        }
    }

    /// Name used in the report tables.
    pub fn display(self) -> &'static str {
        match self {
            Method::Regression => "Regression",
            Method::PointNet => "Proposed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "regression" => Some(Method::Regression),
            "pointnet" | "proposed" => Some(Method::PointNet),
            _ => None,
        }
    }
}

/// One cell of a results table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExperimentSpec {
    pub task: Task,
    pub anatomy: InputAnatomy,
    pub phases: InputPhases,
    pub method: Method,
}

impl ExperimentSpec {
    /// File-name safe identifier, e.g. `prevalent_lvrv_edes_pointnet`.
    pub fn cell_id(&self) -> String {
        let a = match self.anatomy {
            InputAnatomy::Lv => "lv",
            InputAnatomy::LvRv => "lvrv",
        };
        let p = match self.phases {
            InputPhases::Es => "es",
            InputPhases::EdEs => "edes",
        };
        format!("{}_{a}_{p}_{}", self.task.tag(), self.method.tag())
    }

    /// Input column of the results table.
    pub fn input_label(&self) -> &'static str {
        match (self.phases, self.method) {
            (InputPhases::Es, Method::Regression) => "ES Volume",
            (InputPhases::Es, Method::PointNet) => "ES 3D Shape",
            (InputPhases::EdEs, Method::Regression) => "Ejection Fraction",
            (InputPhases::EdEs, Method::PointNet) => "ED+ES 3D Shape",
        }
    }

    fn code(&self) -> u64 {
        (self.task as u64) << 3 | (self.anatomy as u64) << 2 | (self.phases as u64) << 1 | self.method as u64
    }

    /// The eight cells of a task in table order: for each anatomy, ES volume,
    /// ES shape, EF, ED+ES shape.
    pub fn table(task: Task) -> Vec<ExperimentSpec> {
        let mut v = Vec::with_capacity(8);
        for anatomy in [InputAnatomy::Lv, InputAnatomy::LvRv] {
            for phases in [InputPhases::Es, InputPhases::EdEs] {
                for method in [Method::Regression, Method::PointNet] {
                    v.push(ExperimentSpec {
                        task,
                        anatomy,
                        phases,
                        method,
                    });
                }
            }
        }
        v
    }
}

/// Dropout values searched by default, applied to every hidden head layer.
pub const DROPOUT_GRID: [f64; 8] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];

/// How point coordinates are brought to a common frame. Both variants centre
/// on the centroid of the reference phase (ED when present, else ES) and
/// apply the same map to every phase, so systolic motion stays visible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    /// Divide by the largest distance from the centroid in the reference phase.
    UnitSphere,
    /// Divide by a fixed length in mm; keeps absolute size.
    FixedScale(f64),
}

/// Settings shared by every cell of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub seed: u64,
    pub folds: usize,
    /// Hidden-layer widths etc.; `input_channels` is set per cell.
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    /// Dropout settings searched inside each training split. A single entry
    /// skips the search.
    pub dropout_grid: Vec<Vec<f64>>,
    pub inner_folds: usize,
    /// Points per structure fed to the network; `None` uses the whole cloud.
    pub points_per_structure: Option<usize>,
    pub normalization: Normalization,
    pub estimator: VolumeEstimator,
    pub ridge: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        let classifier = ClassifierConfig::default();
        HarnessConfig {
            seed: 0,
            folds: 4,
            dropout_grid: uniform_grid(&DROPOUT_GRID, classifier.head_widths.len() - 1),
            classifier,
            train: TrainConfig::default(),
            inner_folds: 3,
            points_per_structure: None,
            normalization: Normalization::UnitSphere,
            estimator: VolumeEstimator::Disc { n_discs: 20 },
            ridge: DEFAULT_RIDGE,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config("folds must be >= 2".into()));
        }
        if self.dropout_grid.is_empty() {
            return Err(Error::Config("dropout grid is empty".into()));
        }
        if self.dropout_grid.len() > 1 && self.inner_folds < 2 {
            return Err(Error::Config("inner_folds must be >= 2 when searching dropout".into()));
        }
        if let Normalization::FixedScale(mm) = self.normalization {
            if !(mm > 0.0 && mm.is_finite()) {
                return Err(Error::Config("normalization scale must be positive".into()));
            }
        }
        if self.points_per_structure == Some(0) {
            return Err(Error::Config("points_per_structure must be positive".into()));
        }
        self.train.validate()
    }
}

/// Validation outcome of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold_index: usize,
    pub subject_ids: Vec<usize>,
    pub labels: Vec<f64>,
    pub scores: Vec<f64>,
    pub auroc: f64,
    pub train_size: usize,
    /// Dropout used for the network; `None` for regression cells.
    pub dropout: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub spec: ExperimentSpec,
    pub folds: Vec<FoldResult>,
    pub mean_auroc: f64,
    /// ROC of the pooled validation scores.
    pub roc: RocCurve,
}

/// Positions in `cohort` of the subjects a task uses (normals plus its MI class).
pub fn task_indices(cohort: &[SubjectSample], task: Task) -> Vec<usize> {
    cohort
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == ClassLabel::Normal || s.label == task.positive())
        .map(|(i, _)| i)
        .collect()
}

/// Channel count of the encoded input: xyz, one indicator per structure and
/// a phase flag when both phases are present.
pub fn input_channels(anatomy: InputAnatomy, phases: InputPhases) -> usize {
    3 + anatomy.structures().len() + usize::from(phases == InputPhases::EdEs)
}

/// Encodes a subject as an `[N, C]` tensor with rows ordered by phase, then
/// structure. `points_per_structure` keeps the first points of each surface.
pub fn encode_subject(
    sample: &SubjectSample,
    anatomy: InputAnatomy,
    phases: InputPhases,
    points_per_structure: Option<usize>,
    normalization: Normalization,
) -> Result<Tensor> {
    let structures = anatomy.structures();
    let phase_list = phases.phases();
    let c = input_channels(anatomy, phases);
    let mut per: Vec<(usize, usize, Vec<[f64; 3]>)> = Vec::new();
    for (pi, &phase) in phase_list.iter().enumerate() {
        for (si, &s) in structures.iter().enumerate() {
            let mut pts = sample.cloud(phase).of(s);
            if let Some(n) = points_per_structure {
                if pts.len() < n {
                    return Err(Error::Dataset(format!(
                        "{} {} {} has {} points, need {n}",
                        sample.name(),
                        phase.tag(),
                        s.tag(),
                        pts.len()
                    )));
                }
                pts.truncate(n);
            }
            per.push((pi, si, pts));
        }
    }
    let reference: Vec<&[f64; 3]> = per.iter().filter(|(pi, _, _)| *pi == 0).flat_map(|(_, _, p)| p).collect();
    if reference.is_empty() {
        return Err(Error::EmptyCloud("encode_subject"));
    }
    let mut center = [0.0; 3];
    for p in &reference {
        for k in 0..3 {
            center[k] += p[k] / reference.len() as f64;
        }
    }
    let scale = match normalization {
        Normalization::FixedScale(mm) => mm,
        Normalization::UnitSphere => reference
            .iter()
            .map(|p| ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) + (p[2] - center[2]).powi(2)).sqrt())
            .fold(0.0, f64::max),
    };
    if !(scale > 0.0) {
        return Err(Error::DegenerateCloud(format!("{} collapses to a point", sample.name())));
    }
    let total: usize = per.iter().map(|(_, _, p)| p.len()).sum();
    let mut vals = Vec::with_capacity(total * c);
    for (pi, si, pts) in &per {
        for p in pts {
            for k in 0..3 {
                vals.push((p[k] - center[k]) / scale);
            }
            for s in 0..structures.len() {
                vals.push(f64::from(s == *si));
            }
            if phases == InputPhases::EdEs {
                vals.push(f64::from(phase_list[*pi] == Phase::Es));
            }
        }
    }
    Tensor::new(vec![total, c], vals)
}

fn binary_labels(cohort: &[SubjectSample], idx: &[usize], task: Task) -> Vec<f64> {
    idx.iter().map(|&i| f64::from(cohort[i].label == task.positive())).collect()
}

/// Outer folds of a task. They depend on the run seed only, so every cell
/// of a task sees the same splits. Indices refer to positions in `idx`.
pub fn task_folds(cohort: &[SubjectSample], idx: &[usize], task: Task, cfg: &HarnessConfig) -> Result<Vec<Split>> {
    let y: Vec<u8> = binary_labels(cohort, idx, task).iter().map(|&v| v as u8).collect();
    stratified_kfold(&y, cfg.folds, derive_seed(cfg.seed, &[0xF0, task as u64]))
}

fn fold_result(
    fold_index: usize,
    split: &Split,
    idx: &[usize],
    cohort: &[SubjectSample],
    labels: &[f64],
    scores: Vec<f64>,
    dropout: Option<Vec<f64>>,
) -> Result<FoldResult> {
    let vl: Vec<f64> = split.validation.iter().map(|&j| labels[j]).collect();
    Ok(FoldResult {
        fold_index,
        subject_ids: split.validation.iter().map(|&j| cohort[idx[j]].subject_id).collect(),
        auroc: auroc(&scores, &vl)?,
        labels: vl,
        scores,
        train_size: split.train.len(),
        dropout,
    })
}

fn regression_folds(
    spec: &ExperimentSpec,
    cohort: &[SubjectSample],
    idx: &[usize],
    labels: &[f64],
    folds: &[Split],
    cfg: &HarnessConfig,
) -> Result<Vec<FoldResult>> {
    let x: Vec<Vec<f64>> = idx
        .par_iter()
        .map(|&i| extract_features(&cohort[i], spec.anatomy, spec.phases, cfg.estimator))
        .collect::<Result<_>>()?;
    folds
        .iter()
        .enumerate()
        .map(|(f, split)| {
            let tx: Vec<Vec<f64>> = split.train.iter().map(|&j| x[j].clone()).collect();
            let ty: Vec<f64> = split.train.iter().map(|&j| labels[j]).collect();
            let model = logistic_fit(&tx, &ty, cfg.ridge)?;
            let scores = split
                .validation
                .iter()
                .map(|&j| logistic_predict(&model, &x[j]))
                .collect::<Result<Vec<_>>>()?;
            fold_result(f, split, idx, cohort, labels, scores, None)
        })
        .collect()
}

fn pointnet_folds(
    spec: &ExperimentSpec,
    cohort: &[SubjectSample],
    idx: &[usize],
    labels: &[f64],
    folds: &[Split],
    cfg: &HarnessConfig,
) -> Result<Vec<FoldResult>> {
    let data: Vec<LabeledCloud> = idx
        .par_iter()
        .zip(labels.par_iter())
        .map(|(&i, &label)| {
            Ok(LabeledCloud {
                points: encode_subject(
                    &cohort[i],
                    spec.anatomy,
                    spec.phases,
                    cfg.points_per_structure,
                    cfg.normalization,
                )?,
                label,
            })
        })
        .collect::<Result<_>>()?;
    let base = ClassifierConfig {
        input_channels: input_channels(spec.anatomy, spec.phases),
        ..cfg.classifier.clone()
    };
    base.validate()?;
    let cell = spec.code();
    folds
        .par_iter()
        .enumerate()
        .map(|(f, split)| {
            let fold_seed = derive_seed(cfg.seed, &[cell, f as u64]);
            let dropout = if cfg.dropout_grid.len() == 1 {
                cfg.dropout_grid[0].clone()
            } else {
                // inner splits over this fold's training subjects only
                let ty: Vec<u8> = split.train.iter().map(|&j| labels[j] as u8).collect();
                let inner = stratified_kfold(&ty, cfg.inner_folds, derive_seed(fold_seed, &[0x1A]))?;
                let inner: Vec<Split> = inner
                    .into_iter()
                    .map(|s| Split {
                        train: s.train.iter().map(|&k| split.train[k]).collect(),
                        validation: s.validation.iter().map(|&k| split.train[k]).collect(),
                    })
                    .collect();
                let tc = TrainConfig {
                    seed: derive_seed(fold_seed, &[0x6D]),
                    ..cfg.train.clone()
                };
                grid_search_dropout(&base, &data, &cfg.dropout_grid, &inner, &tc)?.best
            };
            let config = ClassifierConfig {
                dropout_probs: dropout.clone(),
                ..base.clone()
            };
            let mut model = build_model(&config, fold_seed)?;
            let tc = TrainConfig {
                seed: fold_seed,
                ..cfg.train.clone()
            };
            train_subset(&mut model, &data, &split.train, &tc)?;
            let scores = predict_many(&mut model, &data, &split.validation)?;
            fold_result(f, split, idx, cohort, labels, scores, Some(dropout))
        })
        .collect()
}

/// Runs one cell with k-fold cross-validation on the task's subjects.
pub fn run_cell(spec: &ExperimentSpec, cohort: &[SubjectSample], cfg: &HarnessConfig) -> Result<CellResult> {
    cfg.validate()?;
    let idx = task_indices(cohort, spec.task);
    let labels = binary_labels(cohort, &idx, spec.task);
    let folds = task_folds(cohort, &idx, spec.task, cfg)?;
    check_no_leakage(&folds)?;
    let results = match spec.method {
        Method::Regression => regression_folds(spec, cohort, &idx, &labels, &folds, cfg)?,
        Method::PointNet => pointnet_folds(spec, cohort, &idx, &labels, &folds, cfg)?,
    };
    let mean_auroc = results.iter().map(|f| f.auroc).sum::<f64>() / results.len() as f64;
    let pooled_scores: Vec<f64> = results.iter().flat_map(|f| f.scores.iter().copied()).collect();
    let pooled_labels: Vec<f64> = results.iter().flat_map(|f| f.labels.iter().copied()).collect();
    Ok(CellResult {
        spec: *spec,
        roc: roc_curve(&pooled_scores, &pooled_labels)?,
        folds: results,
        mean_auroc,
    })
}

/// The eight cells of one task, in table order.
#[derive(Debug, Clone, PartialEq)]
pub struct TableReport {
    pub task: Task,
    pub rows: Vec<CellResult>,
}

impl TableReport {
    /// `(regression row, proposed row)` index pairs.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            if r.spec.method != Method::Regression {
                continue;
            }
            if let Some(j) = self.rows.iter().position(|p| {
                p.spec.method == Method::PointNet && p.spec.anatomy == r.spec.anatomy && p.spec.phases == r.spec.phases
            }) {
                out.push((i, j));
            }
        }
        out
    }

    /// Whether each proposed row beats its regression row, by row index.
    pub fn proposed_beats_regression(&self) -> Vec<Option<bool>> {
        let mut flags = vec![None; self.rows.len()];
        for (r, p) in self.pairs() {
            flags[p] = Some(self.rows[p].mean_auroc > self.rows[r].mean_auroc);
        }
        flags
    }

    pub fn best(&self) -> Option<&CellResult> {
        self.rows.iter().max_by(|a, b| a.mean_auroc.total_cmp(&b.mean_auroc))
    }

    /// Fixed-width text rendering with per-fold AUROCs.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Task: {} MI vs normal", self.task.tag());
        let k = self.rows.first().map_or(0, |r| r.folds.len());
        let _ = write!(out, "{:<8}{:<20}{:<12}{:>8}", "Anatomy", "Input", "Method", "AUROC");
        for f in 0..k {
            let _ = write!(out, "{:>9}", format!("fold{f}"));
        }
        let _ = writeln!(out, "  Proposed>Regression");
        let flags = self.proposed_beats_regression();
        for (row, flag) in self.rows.iter().zip(flags) {
            let s = &row.spec;
            let _ = write!(
                out,
                "{:<8}{:<20}{:<12}{:>8.3}",
                s.anatomy.tag(),
                s.input_label(),
                s.method.display(),
                row.mean_auroc
            );
            for f in &row.folds {
                let _ = write!(out, "{:>9.3}", f.auroc);
            }
            let flag = match flag {
                Some(true) => "yes",
                Some(false) => "no",
                None => "",
            };
            let _ = writeln!(out, "  {flag}");
        }
        out
    }
}

/// Runs the eight cells of a task one after another. Folds inside a cell
/// may run concurrently.
pub fn run_table(task: Task, cohort: &[SubjectSample], cfg: &HarnessConfig) -> Result<TableReport> {
    let rows = ExperimentSpec::table(task)
        .iter()
        .map(|s| run_cell(s, cohort, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(TableReport { task, rows })
}

/// Makes sure no fold trains on its own validation subjects.
pub fn check_no_leakage(folds: &[Split]) -> Result<()> {
    for (f, s) in folds.iter().enumerate() {
        let mut seen = std::collections::HashSet::<usize>::new();
        seen.extend(&s.train);
        if s.validation.iter().any(|v| seen.contains(v)) {
            return Err(Error::Dataset(format!("fold {f} trains on validation subjects")));
        }
    }
    Ok(())
}

pub const RESULTS_CSV_HEADER: &str = "task,anatomy,phases,method,fold,auroc";

/// One row per fold and a `mean` row per cell.
pub fn results_csv(cells: &[CellResult]) -> String {
    let mut out = String::from(RESULTS_CSV_HEADER);
    out.push('\n');
    for c in cells {
        let s = &c.spec;
        let key = format!("{},{},{},{}", s.task.tag(), s.anatomy.tag(), s.phases.tag(), s.method.tag());
        for f in &c.folds {
            let _ = writeln!(out, "{key},{},{:.6}", f.fold_index, f.auroc);
        }
        let _ = writeln!(out, "{key},mean,{:.6}", c.mean_auroc);
    }
    out
}

pub fn roc_csv(roc: &RocCurve) -> String {
    let mut out = String::from("threshold,tpr,fpr\n");
    for i in 0..roc.thresholds.len() {
        let _ = writeln!(out, "{},{:.6},{:.6}", roc.thresholds[i], roc.tpr[i], roc.fpr[i]);
    }
    out
}

pub const SCORES_CSV_HEADER: &str = "fold,subject_id,label,score";

/// Per-subject validation scores of one cell.
pub fn scores_csv(cell: &CellResult) -> String {
    let mut out = String::from(SCORES_CSV_HEADER);
    out.push('\n');
    for f in &cell.folds {
        for ((id, y), p) in f.subject_ids.iter().zip(&f.labels).zip(&f.scores) {
            let _ = writeln!(out, "{},{id},{},{p:.17e}", f.fold_index, *y as u8);
        }
    }
    out
}
