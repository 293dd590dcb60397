//! Cross-validation, AUROC and the experiment tables.

pub mod experiment;
pub mod folds;
pub mod qualitative;
pub mod roc;

pub use folds::{stratified_kfold, Split};
pub use roc::{auroc, auroc_mann_whitney, auroc_trapezoid, roc_curve, RocCurve};
pub use experiment::{
    encode_subject, input_channels, results_csv, roc_csv, run_cell, run_table, scores_csv, task_folds, task_indices,
    CellResult, ExperimentSpec, FoldResult, HarnessConfig, Method, Normalization, TableReport, Task, DROPOUT_GRID,
};
pub use qualitative::{cases_csv, qualitative_report, shape_summary, Outcome, QualitativeCase, QualitativeReport, ShapeSummary};
