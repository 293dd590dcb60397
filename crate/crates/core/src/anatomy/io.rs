//! Plain-text subject files and the cohort manifest.
//!
//! Subject file, comma-delimited, fields in this order:
//!
//! ```text
//! #mishape-subject v1
//! subject_id,label,n_lv_endo,n_lv_epi,n_rv_endo,lv_edv_ml,lv_esv_ml,rv_edv_ml,rv_esv_ml
//! 17,prevalent_mi,1024,1024,1024,140.118934,62.711312,101.532981,45.001133
//! x,y,z,structure,phase
//! 12.345678,-3.210000,4.000000,lv_endo,ED
//! ...
//! ```
//!
//! Point counts are per structure and phase. Coordinates are mm with six
//! decimals; volumes are ml with six decimals. The manifest is
//! `subject_id,label,file` with one row per subject.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::generate::SubjectSample;
use super::{ClassLabel, Phase, PointCloud, Structure};
use crate::error::{Error, Result};

pub const SUBJECT_FORMAT_MAGIC: &str = "#mishape-subject v1";
const HEADER: &str = "subject_id,label,n_lv_endo,n_lv_epi,n_rv_endo,lv_edv_ml,lv_esv_ml,rv_edv_ml,rv_esv_ml";
const POINT_HEADER: &str = "x,y,z,structure,phase";

/// Contents of a subject file.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectFile {
    pub subject_id: usize,
    pub label: ClassLabel,
    pub counts: [usize; 3],
    /// LV EDV, LV ESV, RV EDV, RV ESV in ml.
    pub volumes: [f64; 4],
    pub ed_cloud: PointCloud,
    pub es_cloud: PointCloud,
}

impl SubjectFile {
    pub fn from_sample(s: &SubjectSample) -> Self {
        let v = s.analytic_volumes;
        SubjectFile {
            subject_id: s.subject_id,
            label: s.label,
            counts: Structure::ALL.map(|st| s.ed_cloud.count(st)),
            volumes: [v.lv_edv, v.lv_esv, v.rv_edv, v.rv_esv],
            ed_cloud: s.ed_cloud.clone(),
            es_cloud: s.es_cloud.clone(),
        }
    }
}

pub fn format_subject(s: &SubjectFile) -> String {
    let mut out = String::new();
    let [n0, n1, n2] = s.counts;
    let [v0, v1, v2, v3] = s.volumes;
    let _ = writeln!(out, "{SUBJECT_FORMAT_MAGIC}\n{HEADER}");
    let _ = writeln!(out, "{},{},{n0},{n1},{n2},{v0:.6},{v1:.6},{v2:.6},{v3:.6}", s.subject_id, s.label);
    let _ = writeln!(out, "{POINT_HEADER}");
    for (phase, cloud) in [(Phase::Ed, &s.ed_cloud), (Phase::Es, &s.es_cloud)] {
        for (p, t) in cloud.points.iter().zip(&cloud.tags) {
            let _ = writeln!(out, "{:.6},{:.6},{:.6},{},{}", p[0], p[1], p[2], t.tag(), phase.tag());
        }
    }
    out
}

fn bad(origin: &Path, line: usize, reason: impl std::fmt::Display) -> Error {
    Error::Format {
        path: origin.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    }
}

pub fn parse_subject(text: &str, origin: &Path) -> Result<SubjectFile> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut expect = |want: &str| -> Result<()> {
        match lines.next() {
            Some((_, l)) if l == want => Ok(()),
            Some((i, l)) => Err(bad(origin, i, format!("expected {want:?}, found {l:?}"))),
            None => Err(bad(origin, 0, format!("missing {want:?}"))),
        }
    };
    expect(SUBJECT_FORMAT_MAGIC)?;
    expect(HEADER)?;
    let (i, meta) = lines.next().ok_or_else(|| bad(origin, 3, "missing subject header"))?;
    let f: Vec<&str> = meta.split(',').collect();
    if f.len() != 9 {
        return Err(bad(origin, i, format!("expected 9 fields, found {}", f.len())));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|e| bad(origin, i, e));
    let float = |s: &str| s.parse::<f64>().map_err(|e| bad(origin, i, e));
    let subject_id = int(f[0])?;
    let label = f[1].parse::<ClassLabel>().map_err(|e| bad(origin, i, e))?;
    let counts = [int(f[2])?, int(f[3])?, int(f[4])?];
    let volumes = [float(f[5])?, float(f[6])?, float(f[7])?, float(f[8])?];
    match lines.next() {
        Some((_, l)) if l == POINT_HEADER => {}
        Some((i, l)) => return Err(bad(origin, i, format!("expected point header, found {l:?}"))),
        None => return Err(bad(origin, 4, "missing point header")),
    }
    let mut ed = PointCloud::default();
    let mut es = PointCloud::default();
    for (i, l) in lines {
        if l.is_empty() {
            continue;
        }
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 5 {
            return Err(bad(origin, i, format!("expected 5 fields, found {}", f.len())));
        }
        let c = |s: &str| s.parse::<f64>().map_err(|e| bad(origin, i, e));
        let p = [c(f[0])?, c(f[1])?, c(f[2])?];
        let s = f[3].parse::<Structure>().map_err(|e| bad(origin, i, e))?;
        match f[4].parse::<Phase>().map_err(|e| bad(origin, i, e))? {
            Phase::Ed => ed.push(p, s),
            Phase::Es => es.push(p, s),
        }
    }
    for (phase, cloud) in [("ED", &ed), ("ES", &es)] {
        for (k, s) in Structure::ALL.iter().enumerate() {
            if cloud.count(*s) != counts[k] {
                return Err(Error::Format {
                    path: origin.to_path_buf(),
                    reason: format!(
                        "{phase} {} has {} points, header says {}",
                        s.tag(),
                        cloud.count(*s),
                        counts[k]
                    ),
                });
            }
        }
    }
    Ok(SubjectFile {
        subject_id,
        label,
        counts,
        volumes,
        ed_cloud: ed,
        es_cloud: es,
    })
}

pub fn read_subject(path: &Path) -> Result<SubjectFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_subject(&text, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub subject_id: usize,
    pub label: ClassLabel,
    /// Path relative to the manifest's directory.
    pub file: String,
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::from("subject_id,label,file\n");
    for e in entries {
        let _ = writeln!(out, "{},{},{}", e.subject_id, e.label, e.file);
    }
    out
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "subject_id,label,file")) => {}
        _ => return Err(bad(path, 1, "expected header subject_id,label,file")),
    }
    let mut out = Vec::new();
    for (i, l) in lines {
        if l.is_empty() {
            continue;
        }
        let f: Vec<&str> = l.splitn(3, ',').collect();
        if f.len() != 3 {
            return Err(bad(path, i + 1, "expected 3 fields"));
        }
        out.push(ManifestEntry {
            subject_id: f[0].parse().map_err(|e| bad(path, i + 1, e))?,
            label: f[1].parse().map_err(|e| bad(path, i + 1, e))?,
            file: f[2].to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::{generate_subject, CohortVariant, PopulationParams};
    use crate::rng::rng_from;

    #[test]
    fn text_round_trip_is_stable() {
        let spec = CohortVariant::Dual.spec(ClassLabel::IncidentMi);
        let s = generate_subject(&spec, &PopulationParams::default(), 20, 7, &mut rng_from(2, &[])).unwrap();
        let text = format_subject(&SubjectFile::from_sample(&s));
        let back = parse_subject(&text, Path::new("x")).unwrap();
        assert_eq!(back.subject_id, 7);
        assert_eq!(back.counts, [20, 20, 20]);
        assert_eq!(format_subject(&back), text);
        for (a, b) in back.es_cloud.points.iter().zip(&s.es_cloud.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 5e-7);
            }
        }
    }

    #[test]
    fn count_mismatch_rejected() {
        let spec = CohortVariant::Dual.spec(ClassLabel::Normal);
        let s = generate_subject(&spec, &PopulationParams::default(), 4, 0, &mut rng_from(2, &[])).unwrap();
        let text = format_subject(&SubjectFile::from_sample(&s));
        let cut: String = text.lines().take(text.lines().count() - 1).map(|l| format!("{l}\n")).collect();
        assert!(matches!(parse_subject(&cut, Path::new("x")), Err(Error::Format { .. })));
    }
}
