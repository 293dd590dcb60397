//! Clinical benchmark features and the logistic-regression baseline.

mod logistic;

pub use logistic::{logistic_fit, logistic_predict, LogisticModel, IRLS_MAX_ITER, IRLS_TOL, DEFAULT_RIDGE};

use std::cmp::Ordering;

use crate::anatomy::{analytic_cavity_volume, Phase, PointCloud, Structure, SubjectSample};
use crate::error::{Error, Result};

/// Which ventricles an experiment sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InputAnatomy {
    Lv,
    LvRv,
}

impl InputAnatomy {
    pub fn tag(self) -> &'static str {
        match self {
            InputAnatomy::Lv => "LV",
            InputAnatomy::LvRv => "LV+RV",
        }
    }

    pub fn structures(self) -> &'static [Structure] {
        match self {
            InputAnatomy::Lv => &[Structure::LvEndo, Structure::LvEpi],
            InputAnatomy::LvRv => &[Structure::LvEndo, Structure::LvEpi, Structure::RvEndo],
        }
    }

    /// Cavities whose volumes feed the regression benchmark.
    pub fn cavities(self) -> &'static [Structure] {
        match self {
            InputAnatomy::Lv => &[Structure::LvEndo],
            InputAnatomy::LvRv => &[Structure::LvEndo, Structure::RvEndo],
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "LV" | "lv" => Some(InputAnatomy::Lv),
            "LV+RV" | "lv+rv" | "LVRV" | "lvrv" => Some(InputAnatomy::LvRv),
            _ => None,
        }
    }
}

/// Which phases an experiment sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InputPhases {
    Es,
    EdEs,
}

impl InputPhases {
    pub fn tag(self) -> &'static str {
        match self {
            InputPhases::Es => "ES",
            InputPhases::EdEs => "ED+ES",
        }
    }

    pub fn phases(self) -> &'static [Phase] {
        match self {
            InputPhases::Es => &[Phase::Es],
            InputPhases::EdEs => &[Phase::Ed, Phase::Es],
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ES" | "es" => Some(InputPhases::Es),
            "ED+ES" | "ed+es" | "EDES" | "edes" => Some(InputPhases::EdEs),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VolumeEstimator {
    /// Closed-form volumes of the generating shapes.
    Analytic,
    /// Disc summation on the point clouds.
    Disc { n_discs: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscVolume {
    pub ml: f64,
    pub used_slabs: usize,
    /// Slabs with fewer than 3 points, left out of the sum.
    pub skipped_slabs: usize,
}

fn polygon_area(points: &mut [[f64; 2]]) -> f64 {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    for p in points.iter_mut() {
        p[0] -= cx;
        p[1] -= cy;
    }
    points.sort_by(|a, b| {
        a[1].atan2(a[0])
            .partial_cmp(&b[1].atan2(b[0]))
            .unwrap_or(Ordering::Equal)
    });
    let mut twice = 0.0;
    for i in 0..points.len() {
        let (a, b) = (points[i], points[(i + 1) % points.len()]);
        twice += a[0] * b[1] - a[1] * b[0];
    }
    twice.abs() / 2.0
}

/// Disc-summation volume of one structure, in ml.
///
/// The structure's z-range is cut into `n_discs` equal slabs. Each slab's
/// points are ordered by angle about their centroid and closed into a
/// polygon whose shoelace area, times the slab thickness, is the disc
/// volume. Exact for star-shaped sections in the limit of dense sampling.
pub fn cavity_volume(cloud: &PointCloud, structure: Structure, n_discs: usize) -> Result<DiscVolume> {
    if n_discs == 0 {
        return Err(Error::Parameter("n_discs must be positive".into()));
    }
    let pts = cloud.of(structure);
    if pts.len() < 3 {
        return Err(Error::DegenerateCloud(format!(
            "{} has {} points",
            structure.tag(),
            pts.len()
        )));
    }
    let zmin = pts.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
    let zmax = pts.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max);
    let thickness = (zmax - zmin) / n_discs as f64;
    if !(thickness > 0.0) {
        return Err(Error::DegenerateCloud(format!("{} is flat in z", structure.tag())));
    }
    let mut slabs: Vec<Vec<[f64; 2]>> = vec![Vec::new(); n_discs];
    for p in &pts {
        let k = (((p[2] - zmin) / thickness) as usize).min(n_discs - 1);
        slabs[k].push([p[0], p[1]]);
    }
    let mut mm3 = 0.0;
    let (mut used, mut skipped) = (0, 0);
    for slab in &mut slabs {
        if slab.len() < 3 {
            skipped += 1;
            continue;
        }
        used += 1;
        mm3 += polygon_area(slab) * thickness;
    }
    if used == 0 {
        return Err(Error::DegenerateCloud(format!(
            "no slab of {} has 3 or more points",
            structure.tag()
        )));
    }
    Ok(DiscVolume {
        ml: mm3 / 1000.0,
        used_slabs: used,
        skipped_slabs: skipped,
    })
}

/// `(edv - esv) / edv`; requires `edv > esv > 0`.
pub fn ejection_fraction(edv_ml: f64, esv_ml: f64) -> Result<f64> {
    if !(edv_ml > esv_ml && esv_ml > 0.0 && edv_ml.is_finite()) {
        return Err(Error::Domain(format!(
            "ejection fraction needs edv > esv > 0, got edv={edv_ml}, esv={esv_ml}"
        )));
    }
    Ok((edv_ml - esv_ml) / edv_ml)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VentricleFunction {
    pub edv_ml: f64,
    pub esv_ml: f64,
    pub ef: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClinicalFeatures {
    pub lv: VentricleFunction,
    pub rv: VentricleFunction,
}

fn volume(sample: &SubjectSample, s: Structure, phase: Phase, est: VolumeEstimator) -> Result<f64> {
    match est {
        VolumeEstimator::Analytic => Ok(analytic_cavity_volume(sample.params(phase), s)),
        VolumeEstimator::Disc { n_discs } => Ok(cavity_volume(sample.cloud(phase), s, n_discs)?.ml),
    }
}

pub fn clinical_features(sample: &SubjectSample, est: VolumeEstimator) -> Result<ClinicalFeatures> {
    let f = |s| -> Result<VentricleFunction> {
        let edv_ml = volume(sample, s, Phase::Ed, est)?;
        let esv_ml = volume(sample, s, Phase::Es, est)?;
        Ok(VentricleFunction {
            edv_ml,
            esv_ml,
            ef: ejection_fraction(edv_ml, esv_ml)?,
        })
    };
    Ok(ClinicalFeatures {
        lv: f(Structure::LvEndo)?,
        rv: f(Structure::RvEndo)?,
    })
}

/// ES volume per cavity for ES-only inputs, ejection fraction per cavity
/// for ED+ES inputs. LV first.
pub fn extract_features(
    sample: &SubjectSample,
    anatomy: InputAnatomy,
    phases: InputPhases,
    est: VolumeEstimator,
) -> Result<Vec<f64>> {
    anatomy
        .cavities()
        .iter()
        .map(|&s| match phases {
            InputPhases::Es => volume(sample, s, Phase::Es, est),
            InputPhases::EdEs => {
                ejection_fraction(volume(sample, s, Phase::Ed, est)?, volume(sample, s, Phase::Es, est)?)
            }
        })
        .collect()
}

pub fn feature_names(anatomy: InputAnatomy, phases: InputPhases) -> Vec<String> {
    anatomy
        .cavities()
        .iter()
        .map(|s| {
            let v = if s == &Structure::LvEndo { "lv" } else { "rv" };
            match phases {
                InputPhases::Es => format!("{v}_esv_ml"),
                InputPhases::EdEs => format!("{v}_ef"),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ef_definition() {
        assert!((ejection_fraction(120.0, 50.0).unwrap() - 0.5833333333333334).abs() < 1e-15);
        assert!(ejection_fraction(100.0, 100.0 - 1e-9).unwrap() < 1e-10);
        assert!(ejection_fraction(100.0, 1e-9).unwrap() > 1.0 - 1e-10);
        assert!(matches!(ejection_fraction(50.0, 60.0), Err(Error::Domain(_))));
        assert!(ejection_fraction(50.0, 0.0).is_err());
    }

    #[test]
    fn square_prism_volume() {
        let mut c = PointCloud::default();
        for z in [0.0, 10.0] {
            for (x, y) in [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)] {
                c.push([x, y, z], Structure::LvEndo);
            }
        }
        let v = cavity_volume(&c, Structure::LvEndo, 1).unwrap();
        assert!((v.ml - 1.0).abs() < 1e-12);
        assert_eq!(v.skipped_slabs, 0);
        let sparse = cavity_volume(&c, Structure::LvEndo, 5).unwrap();
        assert_eq!(sparse.used_slabs, 2);
        assert_eq!(sparse.skipped_slabs, 3);
    }

    #[test]
    fn too_few_points() {
        let mut c = PointCloud::default();
        c.push([0.0, 0.0, 0.0], Structure::RvEndo);
        assert!(matches!(cavity_volume(&c, Structure::RvEndo, 4), Err(Error::DegenerateCloud(_))));
    }
}
