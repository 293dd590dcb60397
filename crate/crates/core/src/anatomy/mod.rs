//! Synthetic biventricular anatomy and the slice acquisition chain.
//!
//! Every structure is a truncated ellipsoid in a heart frame whose z axis is
//! the LV long axis (apex at negative z). All three structures are cut by one
//! shared base plane. The heart frame is placed in the scanner frame by a
//! rotation about the long axis followed by a translation, so scanner z
//! remains the long axis.

mod align;
mod generate;
mod io;
mod slices;
mod surface;

use std::fmt;
use std::str::FromStr;

pub use align::{
    correct_misalignment, inject_misalignment, reconstruct_subject, CorrectionResult, REGISTRATION_MAX_ITER,
    REGISTRATION_TOL_MM,
};
pub use generate::{
    generate_cohort, generate_subject, AnatomyVolumes, CohortConfig, CohortVariant, DefectSpec, PopulationParams,
    RemodelingSpec, SubjectSample,
};
pub use io::{
    format_subject, parse_subject, read_manifest, read_subject, write_manifest, ManifestEntry, SubjectFile,
    SUBJECT_FORMAT_MAGIC,
};
pub use slices::{slice_params, slice_sample, AcquisitionConfig, Contour, LaxSlice, LaxView, SaxSlice, SliceAcquisition};
pub use surface::{analytic_cavity_volume, sample_surface, truncated_ellipsoid_volume_ml};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Structure {
    LvEndo,
    LvEpi,
    RvEndo,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::LvEndo, Structure::LvEpi, Structure::RvEndo];

    pub fn tag(self) -> &'static str {
        match self {
            Structure::LvEndo => "lv_endo",
            Structure::LvEpi => "lv_epi",
            Structure::RvEndo => "rv_endo",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Structure {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Structure::ALL
            .into_iter()
            .find(|x| x.tag() == s)
            .ok_or_else(|| format!("unknown structure tag {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Ed,
    Es,
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::Ed => "ED",
            Phase::Es => "ES",
        }
    }
}

impl FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ED" => Ok(Phase::Ed),
            "ES" => Ok(Phase::Es),
            _ => Err(format!("unknown phase tag {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassLabel {
    Normal,
    PrevalentMi,
    IncidentMi,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Normal, ClassLabel::PrevalentMi, ClassLabel::IncidentMi];

    pub fn tag(self) -> &'static str {
        match self {
            ClassLabel::Normal => "normal",
            ClassLabel::PrevalentMi => "prevalent_mi",
            ClassLabel::IncidentMi => "incident_mi",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ClassLabel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ClassLabel::ALL
            .into_iter()
            .find(|x| x.tag() == s)
            .ok_or_else(|| format!("unknown class label {s:?}"))
    }
}

/// An ellipsoid centred at `(center_x, 0, 0)` in the heart frame with semi-axes
/// `a` (x), `b` (y), `c` (z), keeping the part with `z <= (2t - 1)·c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedEllipsoid {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub t: f64,
    pub center_x: f64,
}

impl TruncatedEllipsoid {
    /// Normalised height of the cut, in `(-1, 1]`.
    pub fn cut(&self) -> f64 {
        2.0 * self.t - 1.0
    }

    /// z of the base plane in the heart frame.
    pub fn base_z(&self) -> f64 {
        self.cut() * self.c
    }

    /// `x²/a² + y²/b² + z²/c² - 1` for a heart-frame point.
    pub fn implicit(&self, p: [f64; 3]) -> f64 {
        let x = (p[0] - self.center_x) / self.a;
        let y = p[1] / self.b;
        let z = p[2] / self.c;
        x * x + y * y + z * z - 1.0
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        let finite = [self.a, self.b, self.c, self.t, self.center_x].iter().all(|v| v.is_finite());
        if !finite || self.a <= 0.0 || self.b <= 0.0 || self.c <= 0.0 {
            return Err(Error::Parameter(format!("{what}: semi-axes must be positive and finite, got {self:?}")));
        }
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(Error::Parameter(format!("{what}: truncation fraction {} outside (0, 1]", self.t)));
        }
        Ok(())
    }
}

/// A spherical cap on the LV epicardium where systolic thickening is
/// suppressed. The epicardium is pulled towards the long axis (in-plane, so
/// slices stay planar) by `depth_mm · w`, with `w = cos²(π/2 · θ/radius)`
/// for angular distance `θ < radius` from `direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Defect {
    /// Unit vector in the heart frame.
    pub direction: [f64; 3],
    pub angular_radius: f64,
    pub depth_mm: f64,
}

impl Defect {
    pub fn weight(&self, unit: [f64; 3]) -> f64 {
        let cos = (unit[0] * self.direction[0] + unit[1] * self.direction[1] + unit[2] * self.direction[2]).clamp(-1.0, 1.0);
        let theta = cos.acos();
        if theta >= self.angular_radius {
            return 0.0;
        }
        let c = (std::f64::consts::FRAC_PI_2 * theta / self.angular_radius).cos();
        c * c
    }

    /// Displaced position of a heart-frame point on `epi`. The cap is
    /// measured on the ellipsoid's parameter sphere.
    pub fn displace(&self, epi: &TruncatedEllipsoid, p: [f64; 3]) -> [f64; 3] {
        let u = [(p[0] - epi.center_x) / epi.a, p[1] / epi.b, p[2] / epi.c];
        let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        let w = self.weight([u[0] / n, u[1] / n, u[2] / n]);
        let r = p[0].hypot(p[1]);
        if w == 0.0 || r == 0.0 {
            return p;
        }
        let k = 1.0 - self.depth_mm * w / r;
        [p[0] * k, p[1] * k, p[2]]
    }
}

/// Shape of one subject at one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct VentricleParams {
    pub lv_endo: TruncatedEllipsoid,
    pub lv_epi: TruncatedEllipsoid,
    pub rv_endo: TruncatedEllipsoid,
    /// Rotation about the long axis, radians.
    pub rotation: f64,
    pub translation: [f64; 3],
    /// Present only at ES for MI subjects.
    pub defect: Option<Defect>,
}

impl VentricleParams {
    pub fn structure(&self, s: Structure) -> &TruncatedEllipsoid {
        match s {
            Structure::LvEndo => &self.lv_endo,
            Structure::LvEpi => &self.lv_epi,
            Structure::RvEndo => &self.rv_endo,
        }
    }

    /// RV crescent offset: lateral distance of the RV centre from the LV axis.
    pub fn rv_offset(&self) -> f64 {
        self.rv_endo.center_x
    }

    /// A single structure at the origin with identity placement.
    pub fn single(e: TruncatedEllipsoid) -> Self {
        let epi = TruncatedEllipsoid {
            a: e.a + 1.0,
            b: e.b + 1.0,
            c: e.c + 1.0,
            t: ((e.base_z() / (e.c + 1.0)) + 1.0) / 2.0,
            center_x: 0.0,
        };
        let rv = TruncatedEllipsoid {
            center_x: 2.0 * e.a + 4.0,
            ..epi
        };
        VentricleParams {
            lv_endo: e,
            lv_epi: epi,
            rv_endo: rv,
            rotation: 0.0,
            translation: [0.0; 3],
            defect: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in Structure::ALL {
            self.structure(s).validate(s.tag())?;
        }
        let (n, p) = (&self.lv_endo, &self.lv_epi);
        if !(p.a > n.a && p.b > n.b && p.c > n.c) || n.center_x != 0.0 || p.center_x != 0.0 {
            return Err(Error::Parameter(
                "LV epicardium must enclose the endocardium on a common centre".into(),
            ));
        }
        if !self.rotation.is_finite() || self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("placement must be finite".into()));
        }
        Ok(())
    }

    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.rotation.sin_cos();
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
            p[2] + self.translation[2],
        ]
    }

    pub fn to_heart(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.rotation.sin_cos();
        let x = p[0] - self.translation[0];
        let y = p[1] - self.translation[1];
        [c * x + s * y, -s * x + c * y, p[2] - self.translation[2]]
    }
}

/// Points with a structure tag each.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub tags: Vec<Structure>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: [f64; 3], s: Structure) {
        self.points.push(p);
        self.tags.push(s);
    }

    pub fn extend(&mut self, pts: &[[f64; 3]], s: Structure) {
        for &p in pts {
            self.push(p, s);
        }
    }

    pub fn of(&self, s: Structure) -> Vec<[f64; 3]> {
        self.points
            .iter()
            .zip(&self.tags)
            .filter(|(_, &t)| t == s)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn count(&self, s: Structure) -> usize {
        self.tags.iter().filter(|&&t| t == s).count()
    }

    pub fn translated(&self, d: [f64; 3]) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| [p[0] + d[0], p[1] + d[1], p[2] + d[2]]).collect(),
            tags: self.tags.clone(),
        }
    }
}
