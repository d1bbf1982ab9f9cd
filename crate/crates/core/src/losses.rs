//! Training objective on the final prediction: parameter, 3D joint and 2D reprojection terms.

use std::ops::Range;
use std::sync::Arc;

use crate::body_model::{
    aa_to_rotmat, project_weak, BodyParams, SkeletonTemplate, Vec3, WeakPerspCam, BETA, NUM_BETAS, NUM_JOINTS, PARAM_DIM, POSE,
};
use crate::config::{LossWeights, PoseLoss};
use crate::dataio::{root_relative, MotionSequence};
use crate::error::{Error, Result};
use crate::model::TRANSLATION_SCALE;
use crate::numerics::{Array, Real, Tape, Var};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn pose_vector(p: &BodyParams, mode: PoseLoss) -> Vec<f64> {
    let aa = p.pack()[POSE].to_vec();
    match mode {
        PoseLoss::AxisAngle => aa,
        PoseLoss::RotationMatrix => aa
            .chunks(3)
            .flat_map(|c| aa_to_rotmat([c[0], c[1], c[2]]).into_iter().flatten())
            .collect(),
    }
}

/// `λ_shape·‖β̂ − β‖ + λ_pose·‖pose(Θ̂) − pose(Θ)‖` for one frame.
pub fn loss_smpl(pred: &BodyParams, gt: &BodyParams, w: &LossWeights) -> f64 {
    let shape = dist(&pred.beta, &gt.beta);
    let pose = dist(&pose_vector(pred, w.pose_loss), &pose_vector(gt, w.pose_loss));
    w.lambda_shape * shape + w.lambda_pose * pose
}

/// Mean per-joint Euclidean distance.
pub fn loss_3d(pred: &[Vec3<f64>], gt: &[Vec3<f64>]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predicted joints, {} ground truth", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| dist(a, b)).sum::<f64>() / pred.len() as f64)
}

/// Mean per-joint distance between keypoints and the weak-perspective projection of `pred`.
pub fn loss_2d(gt2d: &[[f64; 2]], pred: &[Vec3<f64>], cam: &WeakPerspCam) -> Result<f64> {
    if gt2d.len() != pred.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} keypoints, {} joints", gt2d.len(), pred.len())));
    }
    let proj = project_weak(cam, pred);
    Ok(proj.iter().zip(gt2d).map(|(a, b)| dist(a, b)).sum::<f64>() / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub smpl: f64,
    pub l3d: f64,
    pub l2d: f64,
}

pub fn loss_final(c: &LossComponents, w: &LossWeights) -> f64 {
    w.lambda1 * c.smpl + w.lambda2 * c.l3d + w.lambda3 * c.l2d
}

/// Ground truth of a batch of windows, `[B·W × d]`, in the layout of the network output.
#[derive(Clone, Debug)]
pub struct LossTargets<T> {
    /// Packed parameters, translation in meters.
    pub params: Array<T>,
    /// Root-relative joints (mm).
    pub joints_rel: Array<T>,
    /// 2D keypoints.
    pub keypoints: Array<T>,
}

impl<T: Real> LossTargets<T> {
    pub fn stack(parts: &[(&MotionSequence, Range<usize>)]) -> Result<Self> {
        let rows: usize = parts.iter().map(|(_, r)| r.len()).sum();
        if rows == 0 {
            return Err(Error::EmptyWindow);
        }
        let (mut p, mut j, mut k) = (
            Vec::with_capacity(rows * PARAM_DIM),
            Vec::with_capacity(rows * 3 * NUM_JOINTS),
            Vec::with_capacity(rows * 2 * NUM_JOINTS),
        );
        for (seq, r) in parts {
            if r.end > seq.len() {
                return Err(Error::Shape(format!("window {r:?} past {} frames", seq.len())));
            }
            for t in r.clone() {
                for (c, v) in seq.params[t].pack().iter().enumerate() {
                    p.push(T::lit(if c < 3 { v / TRANSLATION_SCALE } else { *v }));
                }
                j.extend(root_relative(&seq.joints[t]).iter().flatten().map(|&v| T::lit(v)));
                k.extend(seq.keypoints[t].iter().flatten().map(|&v| T::lit(v)));
            }
        }
        Ok(Self {
            params: Array::new(vec![rows, PARAM_DIM], p)?,
            joints_rel: Array::new(vec![rows, 3 * NUM_JOINTS], j)?,
            keypoints: Array::new(vec![rows, 2 * NUM_JOINTS], k)?,
        })
    }
}

/// Scalar loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub smpl: Var,
    pub l3d: Var,
    pub l2d: Var,
    pub total: Var,
}

/// Network-unit parameters `[r × 85]` to body-model units (translation in mm).
pub fn params_to_mm<T: Real>(tape: &mut Tape<T>, theta: Var) -> Result<Var> {
    let scales = (0..PARAM_DIM)
        .map(|c| T::lit(if c < 3 { TRANSLATION_SCALE } else { 1.0 }))
        .collect();
    tape.scale_cols(theta, scales)
}

/// Frame-averaged loss of network outputs against `targets`.
pub fn batch_loss<T: Real>(
    tape: &mut Tape<T>,
    theta: Var,
    omega: Var,
    targets: &LossTargets<T>,
    template: &Arc<SkeletonTemplate>,
    w: &LossWeights,
) -> Result<LossTerms> {
    let gt = tape.constant(targets.params.clone());
    let diff = tape.sub(theta, gt)?;
    let d_beta = tape.slice_cols(diff, BETA.start, BETA.end)?;
    let shape = tape.group_norms(d_beta, NUM_BETAS)?;
    let shape = tape.mean(shape);
    let pose = match w.pose_loss {
        PoseLoss::AxisAngle => {
            let d = tape.slice_cols(diff, POSE.start, POSE.end)?;
            tape.group_norms(d, POSE.len())?
        }
        PoseLoss::RotationMatrix => {
            let a = tape.slice_cols(theta, POSE.start, POSE.end)?;
            let b = tape.slice_cols(gt, POSE.start, POSE.end)?;
            let ma = tape.axis_angle_to_mat(a)?;
            let mb = tape.axis_angle_to_mat(b)?;
            let d = tape.sub(ma, mb)?;
            tape.group_norms(d, 3 * POSE.len())?
        }
    };
    let pose = tape.mean(pose);
    let shape_w = tape.scale(shape, T::lit(w.lambda_shape));
    let pose_w = tape.scale(pose, T::lit(w.lambda_pose));
    let smpl = tape.add(shape_w, pose_w)?;

    let mm = params_to_mm(tape, theta)?;
    let joints = tape.kinematics(mm, Arc::clone(template))?;
    let rel = tape.root_relative(joints)?;
    let gt_rel = tape.constant(targets.joints_rel.clone());
    let d3 = tape.sub(rel, gt_rel)?;
    let d3 = tape.group_norms(d3, 3)?;
    let l3d = tape.mean(d3);

    let proj = tape.weak_project(omega, joints)?;
    let gt2d = tape.constant(targets.keypoints.clone());
    let d2 = tape.sub(proj, gt2d)?;
    let d2 = tape.group_norms(d2, 2)?;
    let l2d = tape.mean(d2);

    let a = tape.scale(smpl, T::lit(w.lambda1));
    let b = tape.scale(l3d, T::lit(w.lambda2));
    let c = tape.scale(l2d, T::lit(w.lambda3));
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossTerms { smpl, l3d, l2d, total })
}

impl LossTerms {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> (LossComponents, f64) {
        let s = |v: Var| tape.value(v).data()[0].as_f64();
        (
            LossComponents {
                smpl: s(self.smpl),
                l3d: s(self.l3d),
                l2d: s(self.l2d),
            },
            s(self.total),
        )
    }
}
