use std::f64::consts::PI;
use std::fmt::Write as _;

use super::experiment::CellResult;
use crate::anatomy::{ClassLabel, Phase, SubjectSample, VentricleParams};
use crate::error::{Error, Result};

/// Wall sampling used by [`shape_summary`]: levels as fractions of the
/// endocardial height below the base, and sectors around the long axis.
const LEVELS: [f64; 3] = [0.25, 0.5, 0.75];
const SECTORS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSummary {
    pub edv_ml: f64,
    pub esv_ml: f64,
    pub ef: f64,
    pub wall_ed_mm: f64,
    pub wall_es_mm: f64,
    /// Smallest ES/ED wall thickness ratio over all sectors; the defect
    /// region when there is one.
    pub min_thickening_ratio: f64,
}

/// LV wall thickness in mm, one value per (level, sector), measured along
/// horizontal rays from the long axis.
pub fn sector_wall_thickness(params: &VentricleParams) -> Vec<f64> {
    let (endo, epi) = (&params.lv_endo, &params.lv_epi);
    let top = endo.base_z();
    let mut out = Vec::with_capacity(LEVELS.len() * SECTORS);
    for f in LEVELS {
        let z = top - f * (top + endo.c);
        let rho_endo = (1.0 - (z / endo.c).powi(2)).max(0.0).sqrt();
        let rho_epi = (1.0 - (z / epi.c).powi(2)).max(0.0).sqrt();
        for k in 0..SECTORS {
            let psi = 2.0 * PI * k as f64 / SECTORS as f64;
            let mut p = [epi.a * rho_epi * psi.cos(), epi.b * rho_epi * psi.sin(), z];
            if let Some(d) = &params.defect {
                p = d.displace(epi, p);
            }
            let phi = p[1].atan2(p[0]);
            let r_endo = rho_endo / ((phi.cos() / endo.a).powi(2) + (phi.sin() / endo.b).powi(2)).sqrt();
            out.push(p[0].hypot(p[1]) - r_endo);
        }
    }
    out
}

pub fn shape_summary(sample: &SubjectSample) -> ShapeSummary {
    let v = sample.analytic_volumes;
    let ed = sector_wall_thickness(sample.params(Phase::Ed));
    let es = sector_wall_thickness(sample.params(Phase::Es));
    let mean = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    ShapeSummary {
        edv_ml: v.lv_edv,
        esv_ml: v.lv_esv,
        ef: (v.lv_edv - v.lv_esv) / v.lv_edv,
        wall_ed_mm: mean(&ed),
        wall_es_mm: mean(&es),
        min_thickening_ratio: ed.iter().zip(&es).map(|(a, b)| b / a).fold(f64::INFINITY, f64::min),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Good,
    Bad,
}

impl Outcome {
    pub fn tag(self) -> &'static str {
        match self {
            Outcome::Good => "good",
            Outcome::Bad => "bad",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualitativeCase {
    pub subject_id: usize,
    pub label: ClassLabel,
    pub probability: f64,
    pub outcome: Outcome,
    /// 0 is the most correct prediction within the label group.
    pub correctness_rank: usize,
    pub group_size: usize,
    pub summary: ShapeSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualitativeReport {
    /// Ordered MI good, MI bad, normal good, normal bad.
    pub cases: Vec<QualitativeCase>,
    /// Set when a label group had fewer than `2 · n_cases` validation subjects,
    /// in which case all of its subjects are returned.
    pub short_groups: Vec<ClassLabel>,
}

/// Picks the `n_cases` most and least correct validation predictions for the
/// MI class and for normals. Correctness is the probability given to the
/// true class.
pub fn qualitative_report(cell: &CellResult, cohort: &[SubjectSample], n_cases: usize) -> Result<QualitativeReport> {
    if n_cases == 0 {
        return Err(Error::Parameter("n_cases must be positive".into()));
    }
    let by_id = |id: usize| {
        cohort
            .iter()
            .find(|s| s.subject_id == id)
            .ok_or_else(|| Error::Dataset(format!("subject {id} is not in the cohort")))
    };
    let mut cases = Vec::new();
    let mut short_groups = Vec::new();
    for label in [cell.spec.task.positive(), ClassLabel::Normal] {
        let mut group: Vec<(usize, f64, f64)> = Vec::new();
        for f in &cell.folds {
            for ((&id, &p), &y) in f.subject_ids.iter().zip(&f.scores).zip(&f.labels) {
                let positive = y == 1.0;
                if positive == (label != ClassLabel::Normal) {
                    group.push((id, p, if positive { p } else { 1.0 - p }));
                }
            }
        }
        group.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        let n = group.len();
        let picks: Vec<(usize, Outcome)> = if n < 2 * n_cases {
            short_groups.push(label);
            (0..n).map(|r| (r, if r < n.div_ceil(2) { Outcome::Good } else { Outcome::Bad })).collect()
        } else {
            (0..n_cases)
                .map(|r| (r, Outcome::Good))
                .chain((n - n_cases..n).rev().map(|r| (r, Outcome::Bad)))
                .collect()
        };
        for (rank, outcome) in picks {
            let (id, p, _) = group[rank];
            let sample = by_id(id)?;
            cases.push(QualitativeCase {
                subject_id: id,
                label: sample.label,
                probability: p,
                outcome,
                correctness_rank: rank,
                group_size: n,
                summary: shape_summary(sample),
            });
        }
    }
    Ok(QualitativeReport { cases, short_groups })
}

pub const CASE_CSV_HEADER: &str =
    "subject_id,label,outcome,probability,correctness_rank,group_size,edv_ml,esv_ml,ef,wall_ed_mm,wall_es_mm,min_thickening_ratio";

pub fn cases_csv(report: &QualitativeReport) -> String {
    let mut out = String::from(CASE_CSV_HEADER);
    out.push('\n');
    for c in &report.cases {
        let s = &c.summary;
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            c.subject_id,
            c.label,
            c.outcome.tag(),
            c.probability,
            c.correctness_rank,
            c.group_size,
            s.edv_ml,
            s.esv_ml,
            s.ef,
            s.wall_ed_mm,
            s.wall_es_mm,
            s.min_thickening_ratio
        );
    }
    out
}
