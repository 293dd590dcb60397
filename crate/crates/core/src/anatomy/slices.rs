use std::f64::consts::PI;

use super::generate::SubjectSample;
use super::{Phase, PointCloud, Structure, TruncatedEllipsoid, VentricleParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaxView {
    /// Through the LV axis towards the RV (heart-frame x).
    FourChamber,
    /// Through the LV axis, perpendicular to the four-chamber view.
    TwoChamber,
}

impl LaxView {
    pub fn tag(self) -> &'static str {
        match self {
            LaxView::FourChamber => "4ch",
            LaxView::TwoChamber => "2ch",
        }
    }

    fn heart_direction(self) -> [f64; 2] {
        match self {
            LaxView::FourChamber => [1.0, 0.0],
            LaxView::TwoChamber => [0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionConfig {
    pub phase: Phase,
    pub sax_count: usize,
    pub sax_spacing_mm: f64,
    /// Distance of the first SAX plane below the base plane.
    pub sax_base_offset_mm: f64,
    /// Absolute scanner z-levels; replaces the base-relative stack when set.
    pub sax_levels: Option<Vec<f64>>,
    pub sax_points: usize,
    pub lax_points: usize,
    pub lax_views: Vec<LaxView>,
    /// Half-width of the z band around a SAX plane from which LAX anchors
    /// are taken during registration.
    pub anchor_band_mm: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            phase: Phase::Ed,
            sax_count: 10,
            sax_spacing_mm: 10.0,
            sax_base_offset_mm: 5.0,
            sax_levels: None,
            sax_points: 48,
            lax_points: 720,
            lax_views: vec![LaxView::FourChamber, LaxView::TwoChamber],
            anchor_band_mm: 1.0,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sax_points < 3 || self.lax_points < 2 {
            return Err(Error::Parameter("need at least 3 SAX and 2 LAX points per contour".into()));
        }
        if !(self.sax_spacing_mm > 0.0 && self.anchor_band_mm >= 0.0) {
            return Err(Error::Parameter("SAX spacing must be positive and the anchor band non-negative".into()));
        }
        if let Some(levels) = &self.sax_levels {
            if levels.iter().any(|z| !z.is_finite()) {
                return Err(Error::Parameter("SAX levels must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    pub structure: Structure,
    pub points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaxSlice {
    pub z: f64,
    pub contours: Vec<Contour>,
    /// In-plane shift applied by misalignment injection.
    pub shift: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaxSlice {
    pub view: LaxView,
    /// A point on the LV long axis.
    pub origin: [f64; 3],
    /// Unit in-plane direction perpendicular to the long axis.
    pub direction: [f64; 3],
    pub contours: Vec<Contour>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceAcquisition {
    pub phase: Phase,
    /// Strictly increasing in z.
    pub sax: Vec<SaxSlice>,
    pub lax: Vec<LaxSlice>,
    pub anchor_band_mm: f64,
}

impl SliceAcquisition {
    pub fn sax_point_count(&self) -> usize {
        self.sax.iter().flat_map(|s| &s.contours).map(|c| c.points.len()).sum()
    }

    /// All contour points stacked into one sparse cloud.
    pub fn to_cloud(&self) -> PointCloud {
        let mut cloud = PointCloud::default();
        let contours = self.sax.iter().flat_map(|s| &s.contours).chain(self.lax.iter().flat_map(|l| &l.contours));
        for c in contours {
            cloud.extend(&c.points, c.structure);
        }
        cloud
    }
}

fn finish(params: &VentricleParams, s: Structure, e: &TruncatedEllipsoid, p: [f64; 3]) -> [f64; 3] {
    let p = match (s, &params.defect) {
        (Structure::LvEpi, Some(d)) => d.displace(e, p),
        _ => p,
    };
    params.to_world(p)
}

/// Closed contour of the plane `z = z_heart` with one structure, `n` points
/// at equal parameter angle starting on the +x side.
fn sax_contour(params: &VentricleParams, s: Structure, z_heart: f64, n: usize) -> Vec<[f64; 3]> {
    let e = params.structure(s);
    if z_heart > e.base_z() {
        return Vec::new();
    }
    let q = 1.0 - (z_heart / e.c).powi(2);
    if q <= 0.0 {
        return Vec::new();
    }
    let r = q.sqrt();
    (0..n)
        .map(|k| {
            let phi = 2.0 * PI * k as f64 / n as f64;
            let p = [e.center_x + e.a * r * phi.cos(), e.b * r * phi.sin(), z_heart];
            finish(params, s, e, p)
        })
        .collect()
}

/// Contour in the vertical plane spanned by the long axis and the heart-frame
/// direction `dir`. In plane coordinates `(s, z)` the ellipsoid becomes
/// `A(s - s0)² + z²/c² = R`; the kept arc is the part below the base plane.
fn lax_contour(params: &VentricleParams, s: Structure, dir: [f64; 2], n: usize) -> Vec<[f64; 3]> {
    let e = params.structure(s);
    let big_a = dir[0] * dir[0] / (e.a * e.a) + dir[1] * dir[1] / (e.b * e.b);
    let s0 = dir[0] * e.center_x / (e.a * e.a * big_a);
    let r = 1.0 - e.center_x * e.center_x / (e.a * e.a) + big_a * s0 * s0;
    if r <= 0.0 {
        return Vec::new();
    }
    let (rs, rz) = ((r / big_a).sqrt(), e.c * r.sqrt());
    let q = e.base_z() / rz;
    let (start, len, closed) = if q >= 1.0 {
        (0.0, 2.0 * PI, true)
    } else if q <= -1.0 {
        return Vec::new();
    } else {
        (PI - q.asin(), PI + 2.0 * q.asin(), false)
    };
    let steps = if closed { n } else { n - 1 };
    (0..n)
        .map(|k| {
            let phi = start + len * k as f64 / steps as f64;
            let sv = s0 + rs * phi.cos();
            let p = [sv * dir[0], sv * dir[1], rz * phi.sin()];
            finish(params, s, e, p)
        })
        .collect()
}

/// Cuts the anatomy of one phase with the SAX stack and the LAX planes.
pub fn slice_params(params: &VentricleParams, phase: Phase, cfg: &AcquisitionConfig) -> Result<SliceAcquisition> {
    cfg.validate()?;
    params.validate()?;
    let tz = params.translation[2];
    let mut levels = match &cfg.sax_levels {
        Some(l) => l.clone(),
        None => {
            let top = params.lv_endo.base_z() + tz - cfg.sax_base_offset_mm;
            (0..cfg.sax_count).map(|k| top - k as f64 * cfg.sax_spacing_mm).collect()
        }
    };
    levels.sort_by(f64::total_cmp);
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter("SAX levels must be distinct".into()));
    }
    let sax: Vec<SaxSlice> = levels
        .iter()
        .map(|&z| SaxSlice {
            z,
            contours: Structure::ALL
                .iter()
                .map(|&s| Contour {
                    structure: s,
                    points: sax_contour(params, s, z - tz, cfg.sax_points),
                })
                .collect(),
            shift: [0.0; 2],
        })
        .collect();
    let (sin, cos) = params.rotation.sin_cos();
    let lax: Vec<LaxSlice> = cfg
        .lax_views
        .iter()
        .map(|&view| {
            let d = view.heart_direction();
            LaxSlice {
                view,
                origin: params.translation,
                direction: [cos * d[0] - sin * d[1], sin * d[0] + cos * d[1], 0.0],
                contours: Structure::ALL
                    .iter()
                    .map(|&s| Contour {
                        structure: s,
                        points: lax_contour(params, s, d, cfg.lax_points),
                    })
                    .collect(),
            }
        })
        .collect();
    let acq = SliceAcquisition {
        phase,
        sax,
        lax,
        anchor_band_mm: cfg.anchor_band_mm,
    };
    if acq.to_cloud().is_empty() {
        return Err(Error::EmptyAcquisition);
    }
    Ok(acq)
}

/// Slices a subject at the configured phase.
pub fn slice_sample(sample: &SubjectSample, cfg: &AcquisitionConfig) -> Result<SliceAcquisition> {
    slice_params(sample.params(cfg.phase), cfg.phase, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere() -> VentricleParams {
        VentricleParams::single(TruncatedEllipsoid {
            a: 30.0,
            b: 30.0,
            c: 30.0,
            t: 1.0,
            center_x: 0.0,
        })
    }

    #[test]
    fn equator_is_a_circle() {
        let cfg = AcquisitionConfig {
            sax_levels: Some(vec![0.0, 31.0]),
            ..AcquisitionConfig::default()
        };
        let acq = slice_params(&sphere(), Phase::Ed, &cfg).unwrap();
        let lv = &acq.sax[0].contours[0];
        assert_eq!(lv.points.len(), 48);
        for p in &lv.points {
            assert!((p[0].hypot(p[1]) - 30.0).abs() < 1e-6);
        }
        assert!(acq.sax[1].contours.iter().all(|c| c.points.is_empty()));
    }

    #[test]
    fn lax_points_lie_on_surface() {
        let mut p = sphere();
        p.lv_endo.t = 0.8;
        p.lv_endo.b = 26.0;
        p.rotation = 0.4;
        p.translation = [2.0, 3.0, -1.0];
        let acq = slice_params(&p, Phase::Ed, &AcquisitionConfig::default()).unwrap();
        for lax in &acq.lax {
            let c = &lax.contours[0];
            assert_eq!(c.points.len(), 720);
            for q in &c.points {
                let h = p.to_heart(*q);
                assert!(p.lv_endo.implicit(h).abs() < 1e-9);
                assert!(h[2] <= p.lv_endo.base_z() + 1e-9);
            }
        }
    }

    #[test]
    fn missing_everything_is_an_error() {
        let cfg = AcquisitionConfig {
            sax_levels: Some(vec![500.0]),
            lax_views: vec![],
            ..AcquisitionConfig::default()
        };
        assert!(matches!(slice_params(&sphere(), Phase::Ed, &cfg), Err(Error::EmptyAcquisition)));
    }
}
