use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::generate::SubjectSample;
use super::slices::{slice_sample, AcquisitionConfig, Contour, SaxSlice, SliceAcquisition};
use super::{Phase, PointCloud, Structure};
use crate::error::{Error, Result};

pub const REGISTRATION_TOL_MM: f64 = 1e-6;
pub const REGISTRATION_MAX_ITER: usize = 100;

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 3.0 {
            return sd * z;
        }
    }
}

fn translate(contours: &mut [Contour], d: [f64; 2]) {
    for c in contours {
        for p in &mut c.points {
            p[0] += d[0];
            p[1] += d[1];
        }
    }
}

/// Shifts every SAX slice in-plane by an independent Gaussian 2-vector whose
/// components are truncated at ±3σ. LAX slices are untouched. The applied
/// shift is added to each slice's `shift` record.
pub fn inject_misalignment<R: Rng + ?Sized>(
    acq: &SliceAcquisition,
    shift_std_mm: f64,
    rng: &mut R,
) -> Result<SliceAcquisition> {
    if !(shift_std_mm >= 0.0 && shift_std_mm.is_finite()) {
        return Err(Error::Parameter(format!("shift_std_mm must be >= 0, got {shift_std_mm}")));
    }
    let mut out = acq.clone();
    for s in &mut out.sax {
        let d = [truncated_normal(rng, shift_std_mm), truncated_normal(rng, shift_std_mm)];
        translate(&mut s.contours, d);
        s.shift = [s.shift[0] + d[0], s.shift[1] + d[1]];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionResult {
    pub acquisition: SliceAcquisition,
    /// Translation applied to each SAX slice.
    pub recovered: Vec<[f64; 2]>,
    /// Slices with no LAX anchors in band, left unchanged.
    pub flagged: Vec<bool>,
    pub anchor_counts: Vec<usize>,
    pub iterations: Vec<usize>,
    /// Sum of squared in-plane anchor distances at each iterate, final
    /// position included.
    pub objective_history: Vec<Vec<f64>>,
}

/// Closest point to `q` on the closed polygon `ring`, in the xy plane. When
/// several edges are equally close the candidates are averaged, so mirror
/// symmetric configurations give symmetric residuals.
fn nearest_on_ring(ring: &[[f64; 2]], q: [f64; 2]) -> [f64; 2] {
    let mut best_d = f64::INFINITY;
    let mut acc = [0.0; 2];
    let mut ties = 0.0;
    for i in 0..ring.len() {
        let a = ring[i];
        let b = ring[(i + 1) % ring.len()];
        let ab = [b[0] - a[0], b[1] - a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let t = if len2 > 0.0 {
            (((q[0] - a[0]) * ab[0] + (q[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let p = [a[0] + t * ab[0], a[1] + t * ab[1]];
        let d = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
        let eps = 1e-12 * best_d.max(1.0);
        if d < best_d - eps {
            best_d = d;
            acc = p;
            ties = 1.0;
        } else if d <= best_d + eps {
            // a shared vertex shows up twice; counting it twice is harmless
            acc = [acc[0] + p[0], acc[1] + p[1]];
            ties += 1.0;
        }
    }
    [acc[0] / ties, acc[1] / ties]
}

struct SliceFit {
    shift: [f64; 2],
    anchors: usize,
    iterations: usize,
    history: Vec<f64>,
}

fn register_slice(slice: &SaxSlice, lax: &[(Structure, [f64; 3])], band: f64) -> SliceFit {
    let mut groups: Vec<(Vec<[f64; 2]>, Vec<[f64; 2]>)> = Vec::new();
    for c in &slice.contours {
        if c.points.len() < 2 {
            continue;
        }
        let anchors: Vec<[f64; 2]> = lax
            .iter()
            .filter(|(s, p)| *s == c.structure && (p[2] - slice.z).abs() <= band)
            .map(|(_, p)| [p[0], p[1]])
            .collect();
        if !anchors.is_empty() {
            groups.push((c.points.iter().map(|p| [p[0], p[1]]).collect(), anchors));
        }
    }
    let anchors: usize = groups.iter().map(|g| g.1.len()).sum();
    let mut fit = SliceFit {
        shift: [0.0; 2],
        anchors,
        iterations: 0,
        history: Vec::new(),
    };
    if anchors == 0 {
        return fit;
    }
    // residuals of every anchor against the ring moved by `t`
    let residuals = |t: [f64; 2]| -> (f64, [f64; 2]) {
        let (mut obj, mut sum) = (0.0, [0.0; 2]);
        for (ring, pts) in &groups {
            let moved: Vec<[f64; 2]> = ring.iter().map(|p| [p[0] + t[0], p[1] + t[1]]).collect();
            for &q in pts {
                let n = nearest_on_ring(&moved, q);
                let r = [q[0] - n[0], q[1] - n[1]];
                obj += r[0] * r[0] + r[1] * r[1];
                sum[0] += r[0];
                sum[1] += r[1];
            }
        }
        (obj, [sum[0] / anchors as f64, sum[1] / anchors as f64])
    };
    let (mut obj, mut step) = residuals(fit.shift);
    fit.history.push(obj);
    while fit.iterations < REGISTRATION_MAX_ITER {
        fit.shift = [fit.shift[0] + step[0], fit.shift[1] + step[1]];
        fit.iterations += 1;
        let norm = step[0].hypot(step[1]);
        (obj, step) = residuals(fit.shift);
        fit.history.push(obj);
        if norm < REGISTRATION_TOL_MM {
            break;
        }
    }
    fit
}

/// Translation-only registration of every SAX slice onto the LAX contours.
///
/// Anchors for a slice are the LAX points within `anchor_band_mm` of its z.
/// Each anchor is matched to the nearest point on the slice's contour of the
/// same structure; the slice then moves by the mean residual, which is the
/// least-squares translation for fixed matches. Matching and moving alternate
/// until the move is below 1e-6 mm or after 100 moves.
pub fn correct_misalignment(acq: &SliceAcquisition) -> Result<CorrectionResult> {
    let lax: Vec<(Structure, [f64; 3])> = acq
        .lax
        .iter()
        .flat_map(|l| &l.contours)
        .flat_map(|c| c.points.iter().map(move |p| (c.structure, *p)))
        .collect();
    if lax.is_empty() {
        return Err(Error::Parameter("misalignment correction needs a non-empty LAX contour".into()));
    }
    let fits: Vec<SliceFit> = acq
        .sax
        .par_iter()
        .map(|s| register_slice(s, &lax, acq.anchor_band_mm))
        .collect();
    let mut out = acq.clone();
    for (s, f) in out.sax.iter_mut().zip(&fits) {
        translate(&mut s.contours, f.shift);
    }
    Ok(CorrectionResult {
        acquisition: out,
        recovered: fits.iter().map(|f| f.shift).collect(),
        flagged: fits.iter().map(|f| f.anchors == 0).collect(),
        anchor_counts: fits.iter().map(|f| f.anchors).collect(),
        iterations: fits.iter().map(|f| f.iterations).collect(),
        objective_history: fits.into_iter().map(|f| f.history).collect(),
    })
}

/// Pads or trims a structure's points to exactly `n`: a shuffled pass over
/// the points, repeated cyclically when there are fewer than `n`.
fn resample<R: Rng + ?Sized>(pts: &[[f64; 3]], n: usize, rng: &mut R) -> Vec<[f64; 3]> {
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.shuffle(rng);
    (0..n).map(|k| pts[order[k % order.len()]]).collect()
}

/// Replaces a subject's dense clouds with slice-derived ones: both phases are
/// sliced, misaligned, registered and stacked, then every structure is
/// resampled to `points_per_structure` points.
pub fn reconstruct_subject<R: Rng + ?Sized>(
    sample: &SubjectSample,
    acquisition: &AcquisitionConfig,
    shift_std_mm: f64,
    points_per_structure: usize,
    rng: &mut R,
) -> Result<SubjectSample> {
    if points_per_structure == 0 {
        return Err(Error::Parameter("points_per_structure must be positive".into()));
    }
    let mut out = sample.clone();
    for phase in [Phase::Ed, Phase::Es] {
        let cfg = AcquisitionConfig {
            phase,
            ..acquisition.clone()
        };
        let acq = slice_sample(sample, &cfg)?;
        let shifted = inject_misalignment(&acq, shift_std_mm, rng)?;
        let sparse = correct_misalignment(&shifted)?.acquisition.to_cloud();
        let mut cloud = PointCloud::default();
        for s in Structure::ALL {
            let pts = sparse.of(s);
            if pts.is_empty() {
                return Err(Error::DegenerateCloud(format!(
                    "{} {} has no slice points",
                    sample.name(),
                    s.tag()
                )));
            }
            cloud.extend(&resample(&pts, points_per_structure, rng), s);
        }
        match phase {
            Phase::Ed => out.ed_cloud = cloud,
            Phase::Es => out.es_cloud = cloud,
        }
    }
    Ok(out)
}
