use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::surface::{sample_surface, truncated_ellipsoid_volume_ml};
use super::{ClassLabel, Defect, PointCloud, Structure, TruncatedEllipsoid, VentricleParams};
use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng as StreamRng};

/// Population distribution of end-diastolic shape, shared by all classes.
/// Lengths in mm, angles in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationParams {
    pub lv_radius_mm: f64,
    pub lv_radius_sd: f64,
    /// Relative spread of the b/a ratio around 1.
    pub lv_eccentricity_sd: f64,
    pub lv_length_mm: f64,
    pub lv_length_sd: f64,
    pub lv_truncation: f64,
    pub lv_truncation_sd: f64,
    pub wall_mm: f64,
    pub wall_sd: f64,
    /// Apical wall thickness as a fraction of the lateral wall.
    pub apex_wall_ratio: f64,
    pub rv_width_mm: f64,
    pub rv_width_sd: f64,
    pub rv_depth_mm: f64,
    pub rv_depth_sd: f64,
    pub rv_length_mm: f64,
    pub rv_length_sd: f64,
    /// Septal gap between the LV epicardium and the RV cavity.
    pub rv_gap_mm: f64,
    /// Spread of RV ejection fraction around the LV value.
    pub rv_ef_sd: f64,
    pub rotation_sd: f64,
    pub translation_sd_mm: f64,
}

impl Default for PopulationParams {
    fn default() -> Self {
        PopulationParams {
            lv_radius_mm: 25.0,
            lv_radius_sd: 2.0,
            lv_eccentricity_sd: 0.04,
            lv_length_mm: 55.0,
            lv_length_sd: 3.0,
            lv_truncation: 0.75,
            lv_truncation_sd: 0.02,
            wall_mm: 9.0,
            wall_sd: 0.8,
            apex_wall_ratio: 0.8,
            rv_width_mm: 14.0,
            rv_width_sd: 1.5,
            rv_depth_mm: 35.0,
            rv_depth_sd: 3.0,
            rv_length_mm: 48.0,
            rv_length_sd: 3.0,
            rv_gap_mm: 1.0,
            rv_ef_sd: 0.03,
            rotation_sd: 0.1,
            translation_sd_mm: 5.0,
        }
    }
}

impl PopulationParams {
    /// Same means, every spread set to zero.
    pub fn noise_free(&self) -> Self {
        PopulationParams {
            lv_radius_sd: 0.0,
            lv_eccentricity_sd: 0.0,
            lv_length_sd: 0.0,
            lv_truncation_sd: 0.0,
            wall_sd: 0.0,
            rv_width_sd: 0.0,
            rv_depth_sd: 0.0,
            rv_length_sd: 0.0,
            rv_ef_sd: 0.0,
            rotation_sd: 0.0,
            translation_sd_mm: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let means = [
            self.lv_radius_mm,
            self.lv_length_mm,
            self.wall_mm,
            self.apex_wall_ratio,
            self.rv_width_mm,
            self.rv_depth_mm,
            self.rv_length_mm,
        ];
        let sds = [
            self.lv_radius_sd,
            self.lv_eccentricity_sd,
            self.lv_length_sd,
            self.lv_truncation_sd,
            self.wall_sd,
            self.rv_width_sd,
            self.rv_depth_sd,
            self.rv_length_sd,
            self.rv_ef_sd,
            self.rotation_sd,
            self.translation_sd_mm,
            self.rv_gap_mm,
        ];
        if means.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Parameter("population means must be positive".into()));
        }
        if sds.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Parameter("population spreads must be non-negative".into()));
        }
        if !(self.lv_truncation > 0.0 && self.lv_truncation <= 1.0) {
            return Err(Error::Parameter(format!("lv_truncation {} outside (0, 1]", self.lv_truncation)));
        }
        Ok(())
    }
}

/// Where and how strongly systolic thickening is suppressed. Angles in degrees;
/// azimuth is measured from the heart-frame x axis (towards the RV), elevation
/// from the equator (negative towards the apex).
#[derive(Debug, Clone, PartialEq)]
pub struct DefectSpec {
    pub azimuth_deg: f64,
    pub azimuth_jitter_deg: f64,
    pub elevation_deg: f64,
    pub elevation_jitter_deg: f64,
    pub angular_radius_deg: f64,
    pub angular_radius_jitter_deg: f64,
    /// Fraction of the local thickening increment removed at the cap centre.
    /// Values above 1 make the region thin during systole.
    pub suppression: f64,
    pub suppression_sd: f64,
}

impl DefectSpec {
    pub fn with_suppression(suppression: f64) -> Self {
        DefectSpec {
            azimuth_deg: 90.0,
            azimuth_jitter_deg: 20.0,
            elevation_deg: -20.0,
            elevation_jitter_deg: 10.0,
            angular_radius_deg: 50.0,
            angular_radius_jitter_deg: 5.0,
            suppression,
            suppression_sd: 0.1,
        }
    }
}

/// Class-conditional ED→ES remodeling.
#[derive(Debug, Clone, PartialEq)]
pub struct RemodelingSpec {
    pub label: ClassLabel,
    /// Mean LV ejection fraction, (EDV - ESV)/EDV.
    pub volume_change_fraction: f64,
    pub volume_change_sd: f64,
    /// Mean ratio of ES to ED wall thickness.
    pub global_thickening_factor: f64,
    pub thickening_sd: f64,
    pub defect: Option<DefectSpec>,
}

impl RemodelingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.volume_change_fraction > 0.0 && self.volume_change_fraction < 1.0) {
            return Err(Error::Parameter(format!(
                "volume_change_fraction {} outside (0, 1)",
                self.volume_change_fraction
            )));
        }
        if !(self.global_thickening_factor > 0.0 && self.global_thickening_factor.is_finite()) {
            return Err(Error::Parameter("thickening factor must be positive".into()));
        }
        if !(self.volume_change_sd >= 0.0 && self.thickening_sd >= 0.0) {
            return Err(Error::Parameter("remodeling spreads must be non-negative".into()));
        }
        if let Some(d) = &self.defect {
            let ok = d.angular_radius_deg > 0.0
                && d.angular_radius_deg < 180.0
                && d.suppression >= 0.0
                && [d.azimuth_jitter_deg, d.elevation_jitter_deg, d.angular_radius_jitter_deg, d.suppression_sd]
                    .iter()
                    .all(|v| *v >= 0.0);
            if !ok {
                return Err(Error::Parameter(format!("invalid defect spec {d:?}")));
            }
        }
        Ok(())
    }
}

/// Which signal separates MI subjects from normals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CohortVariant {
    /// Lower EF and thickening plus a local defect.
    Dual,
    /// EF and thickening identically distributed across classes; only the
    /// local defect differs.
    VolumeMatched,
    /// EF reduction only, no defect.
    GlobalOnly,
}

impl CohortVariant {
    pub fn tag(self) -> &'static str {
        match self {
            CohortVariant::Dual => "dual",
            CohortVariant::VolumeMatched => "volume_matched",
            CohortVariant::GlobalOnly => "global_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [CohortVariant::Dual, CohortVariant::VolumeMatched, CohortVariant::GlobalOnly]
            .into_iter()
            .find(|v| v.tag() == s)
    }

    pub fn spec(self, label: ClassLabel) -> RemodelingSpec {
        let (ef, thick, supp) = match (self, label) {
            (_, ClassLabel::Normal) => (0.60, 1.45, None),
            (CohortVariant::Dual, ClassLabel::PrevalentMi) => (0.48, 1.30, Some(0.9)),
            (CohortVariant::Dual, ClassLabel::IncidentMi) => (0.55, 1.38, Some(0.45)),
            (CohortVariant::VolumeMatched, ClassLabel::PrevalentMi) => (0.60, 1.45, Some(0.9)),
            (CohortVariant::VolumeMatched, ClassLabel::IncidentMi) => (0.60, 1.45, Some(0.45)),
            (CohortVariant::GlobalOnly, ClassLabel::PrevalentMi) => (0.48, 1.45, None),
            (CohortVariant::GlobalOnly, ClassLabel::IncidentMi) => (0.55, 1.45, None),
        };
        RemodelingSpec {
            label,
            volume_change_fraction: ef,
            volume_change_sd: 0.05,
            global_thickening_factor: thick,
            thickening_sd: 0.08,
            defect: supp.map(DefectSpec::with_suppression),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortConfig {
    pub n_normal: usize,
    pub n_prevalent: usize,
    pub n_incident: usize,
    pub points_per_structure: usize,
    pub population: PopulationParams,
    pub normal: RemodelingSpec,
    pub prevalent: RemodelingSpec,
    pub incident: RemodelingSpec,
}

impl CohortConfig {
    pub fn new(variant: CohortVariant) -> Self {
        CohortConfig {
            n_normal: 539,
            n_prevalent: 294,
            n_incident: 235,
            points_per_structure: 1024,
            population: PopulationParams::default(),
            normal: variant.spec(ClassLabel::Normal),
            prevalent: variant.spec(ClassLabel::PrevalentMi),
            incident: variant.spec(ClassLabel::IncidentMi),
        }
    }

    pub fn with_counts(mut self, normal: usize, prevalent: usize, incident: usize) -> Self {
        self.n_normal = normal;
        self.n_prevalent = prevalent;
        self.n_incident = incident;
        self
    }

    pub fn spec(&self, label: ClassLabel) -> &RemodelingSpec {
        match label {
            ClassLabel::Normal => &self.normal,
            ClassLabel::PrevalentMi => &self.prevalent,
            ClassLabel::IncidentMi => &self.incident,
        }
    }

    /// Labels in cohort order: normals, then prevalent, then incident.
    pub fn labels(&self) -> Vec<ClassLabel> {
        let mut v = vec![ClassLabel::Normal; self.n_normal];
        v.extend(vec![ClassLabel::PrevalentMi; self.n_prevalent]);
        v.extend(vec![ClassLabel::IncidentMi; self.n_incident]);
        v
    }
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig::new(CohortVariant::Dual)
    }
}

/// Cavity and epicardial volumes in ml.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnatomyVolumes {
    pub lv_edv: f64,
    pub lv_esv: f64,
    pub rv_edv: f64,
    pub rv_esv: f64,
    pub lv_epi_ed: f64,
    pub lv_epi_es: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSample {
    pub subject_id: usize,
    pub label: ClassLabel,
    pub ed_params: VentricleParams,
    pub es_params: VentricleParams,
    pub ed_cloud: PointCloud,
    pub es_cloud: PointCloud,
    pub analytic_volumes: AnatomyVolumes,
    /// Drawn ES/ED wall thickness ratio.
    pub thickening: f64,
    /// Drawn defect suppression; zero without a defect.
    pub defect_suppression: f64,
}

impl SubjectSample {
    pub fn name(&self) -> String {
        format!("subject_{:05}", self.subject_id)
    }

    pub fn cloud(&self, phase: super::Phase) -> &PointCloud {
        match phase {
            super::Phase::Ed => &self.ed_cloud,
            super::Phase::Es => &self.es_cloud,
        }
    }

    pub fn params(&self, phase: super::Phase) -> &VentricleParams {
        match phase {
            super::Phase::Ed => &self.ed_params,
            super::Phase::Es => &self.es_params,
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + sd * z
}

fn truncation_for(base_z: f64, c: f64) -> Result<f64> {
    let h = base_z / c;
    if !(h > -1.0 && h <= 1.0) {
        return Err(Error::Generation(format!(
            "base plane z={base_z:.3} does not cut an ellipsoid with c={c:.3}"
        )));
    }
    Ok((h + 1.0) / 2.0)
}

fn heart(lv: TruncatedEllipsoid, wall: [f64; 3], rv: [f64; 3], gap: f64) -> Result<(TruncatedEllipsoid, TruncatedEllipsoid)> {
    let base = lv.base_z();
    let c_epi = lv.c + wall[2];
    let epi = TruncatedEllipsoid {
        a: lv.a + wall[0],
        b: lv.b + wall[1],
        c: c_epi,
        t: truncation_for(base, c_epi)?,
        center_x: 0.0,
    };
    let rv = TruncatedEllipsoid {
        a: rv[0],
        b: rv[1],
        c: rv[2],
        t: truncation_for(base, rv[2])?,
        center_x: epi.a + rv[0] + gap,
    };
    Ok((epi, rv))
}

fn defect_direction(az: f64, el: f64) -> [f64; 3] {
    [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

/// Fails when the dented epicardium reaches the ES endocardium anywhere in
/// the cap.
fn check_defect_wall(endo: &TruncatedEllipsoid, epi: &TruncatedEllipsoid, d: &Defect) -> Result<()> {
    let n = 64;
    for i in 0..=n {
        let uz = -1.0 + (epi.cut() + 1.0) * i as f64 / n as f64;
        let rho = (1.0 - uz * uz).max(0.0).sqrt();
        for j in 0..n {
            let phi = 2.0 * PI * j as f64 / n as f64;
            let p = [epi.a * rho * phi.cos(), epi.b * rho * phi.sin(), epi.c * uz];
            let moved = d.displace(epi, p);
            if d.weight([rho * phi.cos(), rho * phi.sin(), uz]) > 0.0 {
                let r0 = p[0].hypot(p[1]);
                let r1 = moved[0].hypot(moved[1]);
                let crossed = r0 > 0.0 && (moved[0] * p[0] + moved[1] * p[1]) < 0.0;
                if crossed || r1 > r0 || endo.implicit(moved) <= 0.0 {
                    return Err(Error::Generation(format!(
                        "defect of depth {:.2} mm leaves no ES wall at ({:.1}, {:.1}, {:.1})",
                        d.depth_mm, moved[0], moved[1], moved[2]
                    )));
                }
            }
        }
    }
    Ok(())
}

fn cloud<R: Rng + ?Sized>(params: &VentricleParams, n: usize, rng: &mut R) -> Result<PointCloud> {
    let mut c = PointCloud::default();
    for s in Structure::ALL {
        let pts = sample_surface(params, s, n, rng)?;
        c.extend(&pts, s);
    }
    Ok(c)
}

/// Draws one subject. ED shape comes from `population`; the ES shape follows
/// from the drawn ejection fraction and thickening. The LV endocardium shrinks
/// by `k_l = (1 - f)^0.2` along the long axis and by `sqrt((1 - f)/k_l)`
/// across it, with the same cut height, so its volume scales by exactly
/// `1 - f`. The RV follows the same rule with its own fraction.
pub fn generate_subject<R: Rng + ?Sized>(
    spec: &RemodelingSpec,
    population: &PopulationParams,
    points_per_structure: usize,
    subject_id: usize,
    rng: &mut R,
) -> Result<SubjectSample> {
    spec.validate()?;
    population.validate()?;
    let pop = population;
    let a = normal(rng, pop.lv_radius_mm, pop.lv_radius_sd);
    let b = a * normal(rng, 1.0, pop.lv_eccentricity_sd);
    let c = normal(rng, pop.lv_length_mm, pop.lv_length_sd);
    let t = normal(rng, pop.lv_truncation, pop.lv_truncation_sd).clamp(0.55, 1.0);
    let wall = normal(rng, pop.wall_mm, pop.wall_sd);
    let rv = [
        normal(rng, pop.rv_width_mm, pop.rv_width_sd),
        normal(rng, pop.rv_depth_mm, pop.rv_depth_sd),
        normal(rng, pop.rv_length_mm, pop.rv_length_sd),
    ];
    let rotation = normal(rng, 0.0, pop.rotation_sd);
    let translation = [
        normal(rng, 0.0, pop.translation_sd_mm),
        normal(rng, 0.0, pop.translation_sd_mm),
        normal(rng, 0.0, pop.translation_sd_mm),
    ];
    let f = normal(rng, spec.volume_change_fraction, spec.volume_change_sd).clamp(0.05, 0.9);
    let f_rv = normal(rng, f, pop.rv_ef_sd).clamp(0.05, 0.9);
    let thick = normal(rng, spec.global_thickening_factor, spec.thickening_sd);
    let defect_draw = spec.defect.as_ref().map(|d| {
        let az = normal(rng, d.azimuth_deg, d.azimuth_jitter_deg).to_radians();
        let el = normal(rng, d.elevation_deg, d.elevation_jitter_deg).to_radians();
        let radius = normal(rng, d.angular_radius_deg, d.angular_radius_jitter_deg).clamp(5.0, 120.0);
        let s = normal(rng, d.suppression, d.suppression_sd).max(0.0);
        (defect_direction(az, el), radius.to_radians(), s)
    });

    if [a, b, c].iter().any(|v| *v <= 0.0) || rv.iter().any(|v| *v <= 0.0) {
        return Err(Error::Generation("non-positive semi-axis drawn".into()));
    }
    if wall <= 0.0 || thick <= 0.0 {
        return Err(Error::Generation(format!(
            "non-positive wall thickness (wall {wall:.3} mm, thickening {thick:.3})"
        )));
    }
    let walls = [wall, wall, wall * pop.apex_wall_ratio];

    let endo_ed = TruncatedEllipsoid {
        a,
        b,
        c,
        t,
        center_x: 0.0,
    };
    let (epi_ed, rv_ed) = heart(endo_ed, walls, rv, pop.rv_gap_mm)?;

    let k_l = (1.0 - f).powf(0.2);
    let k_r = ((1.0 - f) / k_l).sqrt();
    let endo_es = TruncatedEllipsoid {
        a: a * k_r,
        b: b * k_r,
        c: c * k_l,
        ..endo_ed
    };
    let k_rv = ((1.0 - f_rv) / k_l).sqrt();
    let rv_es_axes = [rv[0] * k_rv, rv[1] * k_rv, rv[2] * k_l];
    let walls_es = walls.map(|w| w * thick);
    let (epi_es, rv_es) = heart(endo_es, walls_es, rv_es_axes, pop.rv_gap_mm)?;

    let defect = match defect_draw {
        Some((direction, angular_radius, s)) => {
            let d = Defect {
                direction,
                angular_radius,
                depth_mm: s * (walls_es[0] - walls[0]).max(0.0),
            };
            check_defect_wall(&endo_es, &epi_es, &d)?;
            Some((d, s))
        }
        None => None,
    };

    let ed_params = VentricleParams {
        lv_endo: endo_ed,
        lv_epi: epi_ed,
        rv_endo: rv_ed,
        rotation,
        translation,
        defect: None,
    };
    let es_params = VentricleParams {
        lv_endo: endo_es,
        lv_epi: epi_es,
        rv_endo: rv_es,
        defect: defect.map(|(d, _)| d),
        ..ed_params.clone()
    };
    ed_params.validate().map_err(|e| Error::Generation(e.to_string()))?;
    es_params.validate().map_err(|e| Error::Generation(e.to_string()))?;

    let analytic_volumes = AnatomyVolumes {
        lv_edv: truncated_ellipsoid_volume_ml(&endo_ed),
        lv_esv: truncated_ellipsoid_volume_ml(&endo_es),
        rv_edv: truncated_ellipsoid_volume_ml(&rv_ed),
        rv_esv: truncated_ellipsoid_volume_ml(&rv_es),
        lv_epi_ed: truncated_ellipsoid_volume_ml(&epi_ed),
        lv_epi_es: truncated_ellipsoid_volume_ml(&epi_es),
    };
    let ed_cloud = cloud(&ed_params, points_per_structure, rng)?;
    let es_cloud = cloud(&es_params, points_per_structure, rng)?;
    Ok(SubjectSample {
        subject_id,
        label: spec.label,
        ed_params,
        es_params,
        ed_cloud,
        es_cloud,
        analytic_volumes,
        thickening: thick,
        defect_suppression: defect.map_or(0.0, |(_, s)| s),
    })
}

/// Stream used for subject `id` of a cohort drawn with `seed`.
pub fn subject_rng(seed: u64, id: usize) -> StreamRng {
    rng_from(seed, &[0xC0407, id as u64])
}

/// Normals first, then prevalent, then incident; subject ids are positions.
/// Each subject draws from its own stream, so the cohort is identical
/// whatever the thread count.
pub fn generate_cohort(config: &CohortConfig, seed: u64) -> Result<Vec<SubjectSample>> {
    config.population.validate()?;
    let labels = config.labels();
    labels
        .par_iter()
        .enumerate()
        .map(|(id, &label)| {
            let mut rng = subject_rng(seed, id);
            generate_subject(
                config.spec(label),
                &config.population,
                config.points_per_structure,
                id,
                &mut rng,
            )
        })
        .collect()
}
