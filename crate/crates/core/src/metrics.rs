//! MPJPE, PA-MPJPE, MPVPE and acceleration error.
//!
//! Point sets are `frames × points` of 3-vectors in millimeters.

use nalgebra::{Matrix3, Vector3};

use crate::body_model::Vec3;
use crate::error::{Error, Result};

fn dist(a: &Vec3<f64>, b: &Vec3<f64>) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_shapes(pred: &[Vec<Vec3<f64>>], gt: &[Vec<Vec3<f64>>]) -> Result<()> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::Shape(format!(
            "prediction has {} frames, ground truth {}; per-frame point counts must match",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Mean Euclidean distance over all frames and points.
pub fn mpjpe(pred: &[Vec<Vec3<f64>>], gt: &[Vec<Vec3<f64>>]) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        for (a, b) in p.iter().zip(g) {
            sum += dist(a, b);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Same computation as [`mpjpe`], over surface points.
pub fn mpvpe(pred: &[Vec<Vec3<f64>>], gt: &[Vec<Vec3<f64>>]) -> Result<f64> {
    mpjpe(pred, gt)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: &Vec3<f64>) -> Vec3<f64> {
        let r = &self.rotation;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.scale * (r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]) + self.translation[i];
        }
        out
    }
}

fn centroid(pts: &[Vec3<f64>]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in pts {
        c += Vector3::from(*p);
    }
    c / pts.len() as f64
}

/// Least-squares similarity `s·R·p + t ≈ g` (Umeyama), reflections excluded.
pub fn procrustes_align(pred: &[Vec3<f64>], gt: &[Vec3<f64>]) -> Result<SimilarityTransform> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} vs {} points", pred.len(), gt.len())));
    }
    if pred.len() < 3 {
        return Err(Error::Alignment("need at least 3 points".into()));
    }
    let (mp, mg) = (centroid(pred), centroid(gt));
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    let mut spread_g: f64 = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let dp = Vector3::from(*p) - mp;
        let dg = Vector3::from(*g) - mg;
        cov += dg * dp.transpose();
        var_p += dp.norm_squared();
        spread_g = spread_g.max(dg.norm());
    }
    let scale_ref = var_p.sqrt().max(spread_g).max(1.0);
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let sv = svd.singular_values;
    // Rank below 2 means the points are collinear or coincident.
    if var_p <= 1e-24 * scale_ref * scale_ref || sv[1] <= 1e-12 * sv[0].max(1e-300) || sv[0] <= 1e-300 {
        return Err(Error::Alignment("degenerate (collinear or coincident) point set".into()));
    }
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = u * d * vt;
    let trace = sv[0] * d[(0, 0)] + sv[1] * d[(1, 1)] + sv[2] * d[(2, 2)];
    let scale = trace / var_p;
    let t = mg - scale * rot * mp;
    let mut rotation = [[0.0; 3]; 3];
    for (i, row) in rotation.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = rot[(i, j)];
        }
    }
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation: [t[0], t[1], t[2]],
    })
}

/// MPJPE after per-frame Procrustes alignment of the prediction onto the ground truth.
pub fn pa_mpjpe(pred: &[Vec<Vec3<f64>>], gt: &[Vec<Vec3<f64>>]) -> Result<f64> {
    check_shapes(pred, gt)?;
    let aligned = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let tr = procrustes_align(p, g)?;
            Ok(p.iter().map(|x| tr.apply(x)).collect())
        })
        .collect::<Result<Vec<Vec<_>>>>()?;
    mpjpe(&aligned, gt)
}

fn second_differences(seq: &[Vec<Vec3<f64>>]) -> Vec<Vec<Vec3<f64>>> {
    (1..seq.len() - 1)
        .map(|t| {
            seq[t]
                .iter()
                .zip(&seq[t - 1])
                .zip(&seq[t + 1])
                .map(|((c, p), n)| [n[0] - 2.0 * c[0] + p[0], n[1] - 2.0 * c[1] + p[1], n[2] - 2.0 * c[2] + p[2]])
                .collect()
        })
        .collect()
}

fn ensure_len(n: usize) -> Result<()> {
    if n < 3 {
        return Err(Error::TooShort(format!("acceleration needs 3 frames, got {n}")));
    }
    Ok(())
}

/// Mean norm of the difference of second differences over interior frames (mm/frame²).
pub fn acc_err(pred: &[Vec<Vec3<f64>>], gt: &[Vec<Vec3<f64>>]) -> Result<f64> {
    check_shapes(pred, gt)?;
    ensure_len(pred.len())?;
    mpjpe(&second_differences(pred), &second_differences(gt))
}

/// One row of the acceleration curve: mean acceleration magnitude per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AccelRow {
    pub t: usize,
    pub gt: f64,
    pub pred: f64,
}

fn mean_norm(frame: &[Vec3<f64>]) -> f64 {
    if frame.is_empty() {
        return 0.0;
    }
    frame.iter().map(|a| dist(a, &[0.0; 3])).sum::<f64>() / frame.len() as f64
}

/// Per-frame mean acceleration magnitudes for interior frames.
pub fn accel_magnitudes(seq: &[Vec<Vec3<f64>>]) -> Result<Vec<f64>> {
    ensure_len(seq.len())?;
    Ok(second_differences(seq).iter().map(|f| mean_norm(f)).collect())
}

pub fn accel_curve(pred: &[Vec<Vec3<f64>>], gt: &[Vec<Vec3<f64>>]) -> Result<Vec<AccelRow>> {
    check_shapes(pred, gt)?;
    let (p, g) = (accel_magnitudes(pred)?, accel_magnitudes(gt)?);
    Ok(p.into_iter()
        .zip(g)
        .enumerate()
        .map(|(i, (pred, gt))| AccelRow { t: i + 1, gt, pred })
        .collect())
}
