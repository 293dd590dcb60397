use std::f64::consts::PI;

use rand::Rng;

use super::{Structure, TruncatedEllipsoid, VentricleParams};
use crate::error::{Error, Result};

/// Enclosed volume of a truncated ellipsoid in ml (inputs in mm).
///
/// With the cut at normalised height `h = 2t - 1`, slicing along z gives
/// `V = ∫_{-c}^{hc} πab(1 - z²/c²) dz = πabc (h - h³/3 + 2/3)`, which is
/// `4/3·πabc` at `t = 1` and `2/3·πabc` at `t = 1/2`.
pub fn truncated_ellipsoid_volume_ml(e: &TruncatedEllipsoid) -> f64 {
    let h = e.cut();
    PI * e.a * e.b * e.c * (h - h * h * h / 3.0 + 2.0 / 3.0) / 1000.0
}

/// Analytic volume enclosed by a structure's surface and the base plane, ml.
/// For the LV epicardium this ignores any systolic defect dent.
pub fn analytic_cavity_volume(params: &VentricleParams, structure: Structure) -> f64 {
    truncated_ellipsoid_volume_ml(params.structure(structure))
}

/// Area-uniform samples on the curved part of a structure's surface, in the
/// scanner frame.
///
/// A direction `u` drawn uniformly on the unit sphere below the cut maps to
/// `(a·ux, b·uy, c·uz)`. The map stretches area by
/// `|(bc·ux, ac·uy, ab·uz)|`, so directions are kept with probability
/// proportional to that factor.
pub fn sample_surface<R: Rng + ?Sized>(
    params: &VentricleParams,
    structure: Structure,
    n_points: usize,
    rng: &mut R,
) -> Result<Vec<[f64; 3]>> {
    if n_points == 0 {
        return Err(Error::Parameter("sample_surface needs n_points >= 1".into()));
    }
    params.validate()?;
    let e = params.structure(structure);
    let h = e.cut();
    let (bc, ac, ab) = (e.b * e.c, e.a * e.c, e.a * e.b);
    let w_max = bc.max(ac).max(ab);
    let defect = match structure {
        Structure::LvEpi => params.defect,
        _ => None,
    };
    let mut out = Vec::with_capacity(n_points);
    while out.len() < n_points {
        // uniform on the sphere: z uniform, azimuth uniform
        let uz: f64 = rng.random_range(-1.0..=h);
        let phi: f64 = rng.random_range(0.0..2.0 * PI);
        let rho = (1.0 - uz * uz).max(0.0).sqrt();
        let (ux, uy) = (rho * phi.cos(), rho * phi.sin());
        let w = ((bc * ux).powi(2) + (ac * uy).powi(2) + (ab * uz).powi(2)).sqrt();
        if rng.random::<f64>() * w_max >= w {
            continue;
        }
        let mut p = [e.center_x + e.a * ux, e.b * uy, e.c * uz];
        if let Some(d) = &defect {
            p = d.displace(e, p);
        }
        out.push(params.to_world(p));
    }
    Ok(out)
}
