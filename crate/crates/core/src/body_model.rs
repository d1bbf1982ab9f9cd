//! Simplified SMPL-style articulated body.
//!
//! A 24-joint kinematic tree with SMPL's parent ordering, a linear joint
//! shape basis, a small rigidly attached vertex set and the weak-perspective
//! camera. Lengths are millimetres throughout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Real;

pub const NUM_JOINTS: usize = 24;
pub const NUM_BETAS: usize = 10;
/// Length of the packed `[T | R | θ | β]` vector.
pub const PARAM_DIM: usize = 85;
pub const CAM_DIM: usize = 3;
pub const POSE6D_DIM: usize = 6 * NUM_JOINTS;
pub const DEFAULT_NUM_VERTICES: usize = 128;
pub const MAX_ABS_BETA: f64 = 5.0;

/// Offsets of each block inside the packed parameter vector.
pub const TRANSL: std::ops::Range<usize> = 0..3;
pub const ROOT: std::ops::Range<usize> = 3..6;
pub const THETA: std::ops::Range<usize> = 6..75;
pub const POSE: std::ops::Range<usize> = 3..75;
pub const BETA: std::ops::Range<usize> = 75..85;

pub const SMPL_PARENTS: [i32; NUM_JOINTS] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
];

// Approximate SMPL neutral rest skeleton, child relative to parent, millimetres.
const REST_OFFSETS_MM: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [58.0, -82.0, -18.0],
    [-60.0, -91.0, -14.0],
    [4.0, 109.0, -22.0],
    [43.0, -375.0, 8.0],
    [-43.0, -383.0, -5.0],
    [5.0, 135.0, 27.0],
    [-15.0, -398.0, -37.0],
    [19.0, -392.0, -34.0],
    [-2.0, 53.0, 3.0],
    [41.0, -56.0, 120.0],
    [-35.0, -61.0, 127.0],
    [-13.0, 214.0, -34.0],
    [72.0, 121.0, -34.0],
    [-83.0, 119.0, -29.0],
    [10.0, 89.0, 50.0],
    [123.0, 45.0, -19.0],
    [-113.0, 47.0, -9.0],
    [255.0, -16.0, -23.0],
    [-260.0, -14.0, -31.0],
    [266.0, 9.0, -7.0],
    [-269.0, 7.0, -6.0],
    [87.0, -9.0, -16.0],
    [-89.0, -9.0, -10.0],
];

const TEMPLATE_SEED: u64 = 0x5EED_B0D7;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

/// Pose, shape and root translation of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyParams {
    /// Root translation (mm).
    pub translation: Vec3<f64>,
    /// Root rotation, axis-angle.
    pub rotation: Vec3<f64>,
    /// Rotations of joints 1..24 relative to their parents, axis-angle.
    pub theta: [Vec3<f64>; NUM_JOINTS - 1],
    pub beta: [f64; NUM_BETAS],
}

impl Default for BodyParams {
    fn default() -> Self {
        Self {
            translation: [0.0; 3],
            rotation: [0.0; 3],
            theta: [[0.0; 3]; NUM_JOINTS - 1],
            beta: [0.0; NUM_BETAS],
        }
    }
}

impl BodyParams {
    pub fn pack(&self) -> [f64; PARAM_DIM] {
        let mut out = [0.0; PARAM_DIM];
        out[TRANSL].copy_from_slice(&self.translation);
        out[ROOT].copy_from_slice(&self.rotation);
        for (j, r) in self.theta.iter().enumerate() {
            out[6 + 3 * j..9 + 3 * j].copy_from_slice(r);
        }
        out[BETA].copy_from_slice(&self.beta);
        out
    }

    pub fn unpack(v: &[f64]) -> Result<Self> {
        if v.len() != PARAM_DIM {
            return Err(Error::Shape(format!(
                "body parameters need {PARAM_DIM} values, got {}",
                v.len()
            )));
        }
        let mut p = Self::default();
        p.translation.copy_from_slice(&v[TRANSL]);
        p.rotation.copy_from_slice(&v[ROOT]);
        for j in 0..NUM_JOINTS - 1 {
            p.theta[j].copy_from_slice(&v[6 + 3 * j..9 + 3 * j]);
        }
        p.beta.copy_from_slice(&v[BETA]);
        Ok(p)
    }

    /// Axis-angle of joint `j`, with joint 0 being the root.
    pub fn joint_rotation(&self, j: usize) -> Vec3<f64> {
        if j == 0 {
            self.rotation
        } else {
            self.theta[j - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let packed = self.pack();
        if packed.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("body parameters".into()));
        }
        if let Some(b) = self.beta.iter().find(|b| b.abs() > MAX_ABS_BETA) {
            return Err(Error::Config(format!("shape coefficient {b} exceeds ±{MAX_ABS_BETA}")));
        }
        Ok(())
    }
}

/// Weak-perspective camera `ω = (s, tx, ty)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakPerspCam {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl WeakPerspCam {
    pub fn new(scale: f64, tx: f64, ty: f64) -> Result<Self> {
        if !(scale > 0.0) || !tx.is_finite() || !ty.is_finite() || !scale.is_finite() {
            return Err(Error::Config(format!(
                "weak-perspective scale must be positive and finite, got ({scale}, {tx}, {ty})"
            )));
        }
        Ok(Self { scale, tx, ty })
    }

    pub fn pack(&self) -> [f64; CAM_DIM] {
        [self.scale, self.tx, self.ty]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [s, tx, ty] => Self::new(*s, *tx, *ty),
            _ => Err(Error::Shape(format!("camera needs 3 values, got {}", v.len()))),
        }
    }
}

/// Articulated template: tree, bone offsets, joint shape basis and surface points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTemplate {
    /// Parent of each joint, `-1` for the root.
    pub parents: Vec<i32>,
    pub rest_offsets: Vec<Vec3<f64>>,
    /// `shape_basis[j][axis][k]`: bone offset change per unit of `β_k`.
    pub shape_basis: Vec<[[f64; NUM_BETAS]; 3]>,
    /// Vertex offsets in the rest frame of their attachment joint.
    pub vertex_offsets: Vec<Vec3<f64>>,
    pub vertex_joints: Vec<usize>,
}

impl SkeletonTemplate {
    /// The fixed template shipped with the crate.
    pub fn standard() -> Self {
        Self::with_vertices(DEFAULT_NUM_VERTICES)
    }

    pub fn with_vertices(num_vertices: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED);
        let mut shape_basis = vec![[[0.0; NUM_BETAS]; 3]; NUM_JOINTS];
        for (j, basis) in shape_basis.iter_mut().enumerate().skip(1) {
            let off = REST_OFFSETS_MM[j];
            let len = norm3(off);
            for axis in 0..3 {
                // β_0 is a global bone-length scale; the rest are small random deformations.
                basis[axis][0] = 0.05 * off[axis];
                for k in 1..NUM_BETAS {
                    let g: f64 = rng.sample(StandardNormal);
                    basis[axis][k] = 0.015 * len * g;
                }
            }
        }
        let mut vertex_offsets = Vec::with_capacity(num_vertices);
        let mut vertex_joints = Vec::with_capacity(num_vertices);
        for v in 0..num_vertices {
            let mut dir = [0.0f64; 3];
            for d in dir.iter_mut() {
                *d = rng.sample(StandardNormal);
            }
            let n = norm3(dir).max(1e-9);
            let radius = 40.0 + 40.0 * rng.random::<f64>();
            vertex_offsets.push([dir[0] / n * radius, dir[1] / n * radius, dir[2] / n * radius]);
            vertex_joints.push(v % NUM_JOINTS);
        }
        Self {
            parents: SMPL_PARENTS.to_vec(),
            rest_offsets: REST_OFFSETS_MM.to_vec(),
            shape_basis,
            vertex_offsets,
            vertex_joints,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.vertex_offsets.len()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        usize::try_from(self.parents[j]).ok()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("skeleton template: {m}")));
        if self.parents.len() != NUM_JOINTS
            || self.rest_offsets.len() != NUM_JOINTS
            || self.shape_basis.len() != NUM_JOINTS
        {
            return bad("expected 24 joints");
        }
        if self.parents[0] != -1 || self.rest_offsets[0] != [0.0; 3] {
            return bad("joint 0 must be an unoffset root");
        }
        for j in 1..NUM_JOINTS {
            // Parents precede children, which makes the graph a tree rooted at 0.
            if self.parents[j] < 0 || self.parents[j] as usize >= j {
                return bad("parents must precede children");
            }
        }
        if self.vertex_joints.len() != self.vertex_offsets.len()
            || self.vertex_joints.iter().any(|&j| j >= NUM_JOINTS)
        {
            return bad("vertex attachments out of range");
        }
        Ok(())
    }

    fn bone<T: Real>(&self, j: usize, beta: &[T]) -> Vec3<T> {
        let mut b = [T::zero(); 3];
        for (axis, out) in b.iter_mut().enumerate() {
            let mut v = T::lit(self.rest_offsets[j][axis]);
            for (k, &bk) in beta.iter().enumerate() {
                v += T::lit(self.shape_basis[j][axis][k]) * bk;
            }
            *out = v;
        }
        b
    }
}

// ---------------------------------------------------------------------------
// small 3-vector / 3×3 helpers

pub(crate) fn norm3<T: Real>(v: Vec3<T>) -> T {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub(crate) fn mat_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub(crate) fn mat_vec<T: Real>(a: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub(crate) fn mat_t_vec<T: Real>(a: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [
        a[0][0] * v[0] + a[1][0] * v[1] + a[2][0] * v[2],
        a[0][1] * v[0] + a[1][1] * v[1] + a[2][1] * v[2],
        a[0][2] * v[0] + a[1][2] * v[1] + a[2][2] * v[2],
    ]
}

pub(crate) fn transpose<T: Real>(a: &Mat3<T>) -> Mat3<T> {
    let mut out = *a;
    for (i, row) in out.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = a[j][i];
        }
    }
    out
}

fn identity<T: Real>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

fn skew<T: Real>(a: Vec3<T>) -> Mat3<T> {
    let z = T::zero();
    [[z, -a[2], a[1]], [a[2], z, -a[0]], [-a[1], a[0], z]]
}

pub fn det3(m: &Mat3<f64>) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Coefficients of the Rodrigues formula and their derivatives divided by θ:
/// `A = sinθ/θ`, `B = (1−cosθ)/θ²`, `C = A'/θ`, `D = B'/θ`.
fn rodrigues_coeffs<T: Real>(theta: T) -> [T; 4] {
    let t2 = theta * theta;
    let small = (T::epsilon() * T::lit(1000.0)).powf(T::lit(1.0 / 6.0));
    if theta < small {
        let t4 = t2 * t2;
        [
            T::one() - t2 / T::lit(6.0) + t4 / T::lit(120.0),
            T::lit(0.5) - t2 / T::lit(24.0) + t4 / T::lit(720.0),
            T::lit(-1.0 / 3.0) + t2 / T::lit(30.0) - t4 / T::lit(840.0),
            T::lit(-1.0 / 12.0) + t2 / T::lit(180.0) - t4 / T::lit(6720.0),
        ]
    } else {
        let (s, c) = theta.sin_cos();
        let a = s / theta;
        let b = (T::one() - c) / t2;
        [
            a,
            b,
            (theta * c - s) / (t2 * theta),
            (theta * s - T::lit(2.0) * (T::one() - c)) / (t2 * t2),
        ]
    }
}

/// Rodrigues formula; near-zero angles fall back to the series expansion.
pub fn aa_to_rotmat<T: Real>(aa: Vec3<T>) -> Mat3<T> {
    let [a, b, _, _] = rodrigues_coeffs(norm3(aa));
    let k = skew(aa);
    let k2 = mat_mul(&k, &k);
    let mut r = identity();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Rotation matrix and its partial derivatives with respect to each axis-angle component.
pub(crate) fn aa_to_rotmat_with_grad<T: Real>(aa: Vec3<T>) -> (Mat3<T>, [Mat3<T>; 3]) {
    let [a, b, c, d] = rodrigues_coeffs(norm3(aa));
    let k = skew(aa);
    let k2 = mat_mul(&k, &k);
    let mut r = identity();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    let mut grads = [[[T::zero(); 3]; 3]; 3];
    for (axis, g) in grads.iter_mut().enumerate() {
        let mut e = [T::zero(); 3];
        e[axis] = T::one();
        let ki = skew(e);
        let kik = mat_mul(&ki, &k);
        let kki = mat_mul(&k, &ki);
        let ai = aa[axis];
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] = c * ai * k[i][j] + a * ki[i][j] + d * ai * k2[i][j] + b * (kik[i][j] + kki[i][j]);
            }
        }
    }
    (r, grads)
}

/// Inverse of [`aa_to_rotmat`] with the angle in `[0, π]`, through a unit quaternion.
pub fn rotmat_to_aa(r: &Mat3<f64>) -> Vec3<f64> {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let q = if tr > 0.0 {
        let s = 2.0 * (tr + 1.0).sqrt();
        [0.25 * s, (r[2][1] - r[1][2]) / s, (r[0][2] - r[2][0]) / s, (r[1][0] - r[0][1]) / s]
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = 2.0 * (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt();
        [(r[2][1] - r[1][2]) / s, 0.25 * s, (r[0][1] + r[1][0]) / s, (r[0][2] + r[2][0]) / s]
    } else if r[1][1] > r[2][2] {
        let s = 2.0 * (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt();
        [(r[0][2] - r[2][0]) / s, (r[0][1] + r[1][0]) / s, 0.25 * s, (r[1][2] + r[2][1]) / s]
    } else {
        let s = 2.0 * (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt();
        [(r[1][0] - r[0][1]) / s, (r[0][2] + r[2][0]) / s, (r[1][2] + r[2][1]) / s, 0.25 * s]
    };
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    let v = [sign * q[1], sign * q[2], sign * q[3]];
    let n = norm3(v);
    if n == 0.0 {
        return [0.0; 3];
    }
    let k = 2.0 * n.atan2(sign * q[0]) / n;
    [k * v[0], k * v[1], k * v[2]]
}

/// First two columns, column-major: `(r00, r10, r20, r01, r11, r21)`.
pub fn rotmat_to_6d(r: &Mat3<f64>) -> [f64; 6] {
    [r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]]
}

/// Gram–Schmidt on the two 3-vector halves, completed by a cross product.
pub fn sixd_to_rotmat(v: &[f64; 6]) -> Result<Mat3<f64>> {
    let a1 = [v[0], v[1], v[2]];
    let a2 = [v[3], v[4], v[5]];
    let n1 = norm3(a1);
    if !(n1 > 1e-12) {
        return Err(Error::Degenerate("6D rotation: zero first column".into()));
    }
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let dot = b1[0] * a2[0] + b1[1] * a2[1] + b1[2] * a2[2];
    let u2 = [a2[0] - dot * b1[0], a2[1] - dot * b1[1], a2[2] - dot * b1[2]];
    let n2 = norm3(u2);
    if !(n2 > 1e-12 * norm3(a2).max(1e-300)) || !(n2 > 1e-300) {
        return Err(Error::Degenerate("6D rotation: collinear or zero columns".into()));
    }
    let b2 = [u2[0] / n2, u2[1] / n2, u2[2] / n2];
    let b3 = [
        b1[1] * b2[2] - b1[2] * b2[1],
        b1[2] * b2[0] - b1[0] * b2[2],
        b1[0] * b2[1] - b1[1] * b2[0],
    ];
    Ok([[b1[0], b2[0], b3[0]], [b1[1], b2[1], b3[1]], [b1[2], b2[2], b3[2]]])
}

/// 24 rotations in 6D form, root first: `[R | θ_1 … θ_23]`.
pub fn pack_pose_144(rotation: &Vec3<f64>, theta: &[Vec3<f64>]) -> Vec<f64> {
    std::iter::once(rotation)
        .chain(theta)
        .flat_map(|aa| rotmat_to_6d(&aa_to_rotmat(*aa)))
        .collect()
}

/// Inverse view of [`pack_pose_144`]: the 24 rotation matrices.
pub fn unpack_pose_144(v: &[f64]) -> Result<Vec<Mat3<f64>>> {
    if v.len() != POSE6D_DIM {
        return Err(Error::Shape(format!("6D pose needs {POSE6D_DIM} values, got {}", v.len())));
    }
    v.chunks(6)
        .map(|c| sixd_to_rotmat(&[c[0], c[1], c[2], c[3], c[4], c[5]]))
        .collect()
}

/// Intermediate results of a kinematics pass, kept for the backward sweep.
pub(crate) struct FkState<T> {
    pub joints: [Vec3<T>; NUM_JOINTS],
    pub global: [Mat3<T>; NUM_JOINTS],
    pub local: [Mat3<T>; NUM_JOINTS],
    pub local_grads: [[Mat3<T>; 3]; NUM_JOINTS],
    pub bones: [Vec3<T>; NUM_JOINTS],
}

/// Kinematics on a packed 85-vector (translation in mm).
pub(crate) fn fk_packed<T: Real>(params: &[T], tmpl: &SkeletonTemplate) -> FkState<T> {
    debug_assert_eq!(params.len(), PARAM_DIM);
    let beta = &params[BETA];
    let mut st = FkState {
        joints: [[T::zero(); 3]; NUM_JOINTS],
        global: [identity(); NUM_JOINTS],
        local: [identity(); NUM_JOINTS],
        local_grads: [[[[T::zero(); 3]; 3]; 3]; NUM_JOINTS],
        bones: [[T::zero(); 3]; NUM_JOINTS],
    };
    for j in 0..NUM_JOINTS {
        let o = 3 + 3 * j;
        let (r, g) = aa_to_rotmat_with_grad([params[o], params[o + 1], params[o + 2]]);
        st.local[j] = r;
        st.local_grads[j] = g;
        st.bones[j] = tmpl.bone(j, beta);
        match tmpl.parent(j) {
            None => {
                st.global[j] = r;
                for a in 0..3 {
                    st.joints[j][a] = params[a] + st.bones[j][a];
                }
            }
            Some(p) => {
                st.global[j] = mat_mul(&st.global[p], &r);
                let off = mat_vec(&st.global[p], st.bones[j]);
                for a in 0..3 {
                    st.joints[j][a] = st.joints[p][a] + off[a];
                }
            }
        }
    }
    st
}

/// Gradient of a scalar with respect to the packed parameters, given its gradient
/// with respect to the 24 joint positions.
pub(crate) fn fk_backward<T: Real>(
    st: &FkState<T>,
    tmpl: &SkeletonTemplate,
    grad_joints: &[T],
    out: &mut [T],
) {
    let mut gp = [[T::zero(); 3]; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        gp[j].copy_from_slice(&grad_joints[3 * j..3 * j + 3]);
    }
    let mut gg = [[[T::zero(); 3]; 3]; NUM_JOINTS];
    let mut glocal = [[[T::zero(); 3]; 3]; NUM_JOINTS];
    let mut gbeta = [T::zero(); NUM_BETAS];
    let mut add_bone_grad = |j: usize, gb: Vec3<T>| {
        for (a, &g) in gb.iter().enumerate() {
            for (k, acc) in gbeta.iter_mut().enumerate() {
                *acc += T::lit(tmpl.shape_basis[j][a][k]) * g;
            }
        }
    };
    for j in (0..NUM_JOINTS).rev() {
        match tmpl.parent(j) {
            Some(p) => {
                let gpj = gp[j];
                for a in 0..3 {
                    gp[p][a] += gpj[a];
                }
                let gpar = st.global[p];
                add_bone_grad(j, mat_t_vec(&gpar, gpj));
                let lt = transpose(&st.local[j]);
                let gj = gg[j];
                let via_child = mat_mul(&gj, &lt);
                let to_local = mat_mul(&transpose(&gpar), &gj);
                for r in 0..3 {
                    for c in 0..3 {
                        gg[p][r][c] += gpj[r] * st.bones[j][c] + via_child[r][c];
                    }
                }
                glocal[j] = to_local;
            }
            None => {
                out[TRANSL].copy_from_slice(&gp[j]);
                add_bone_grad(j, gp[j]);
                glocal[j] = gg[j];
            }
        }
    }
    for j in 0..NUM_JOINTS {
        for axis in 0..3 {
            let d = &st.local_grads[j][axis];
            let mut s = T::zero();
            for r in 0..3 {
                for c in 0..3 {
                    s += glocal[j][r][c] * d[r][c];
                }
            }
            out[3 + 3 * j + axis] = s;
        }
    }
    out[BETA].copy_from_slice(&gbeta);
}

/// Joint positions (mm) for one frame.
pub fn forward_kinematics(p: &BodyParams, tmpl: &SkeletonTemplate) -> [Vec3<f64>; NUM_JOINTS] {
    fk_packed(&p.pack(), tmpl).joints
}

/// Surface points, each carried rigidly by its attachment joint.
pub fn skin_vertices(p: &BodyParams, tmpl: &SkeletonTemplate) -> Vec<Vec3<f64>> {
    let st = fk_packed(&p.pack(), tmpl);
    tmpl.vertex_offsets
        .iter()
        .zip(&tmpl.vertex_joints)
        .map(|(off, &j)| {
            let r = mat_vec(&st.global[j], *off);
            [st.joints[j][0] + r[0], st.joints[j][1] + r[1], st.joints[j][2] + r[2]]
        })
        .collect()
}

/// `(u, v) = (s·x + tx, s·y + ty)`.
pub fn project_weak(cam: &WeakPerspCam, points: &[Vec3<f64>]) -> Vec<[f64; 2]> {
    points
        .iter()
        .map(|p| [cam.scale * p[0] + cam.tx, cam.scale * p[1] + cam.ty])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_aa(rng: &mut ChaCha8Rng, max_angle: f64) -> Vec3<f64> {
        let mut d = [0.0; 3];
        for x in d.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let n = norm3(d);
        let angle = rng.random_range(0.0..max_angle);
        [d[0] / n * angle, d[1] / n * angle, d[2] / n * angle]
    }

    fn max_diff(a: &Mat3<f64>, b: &Mat3<f64>) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                m = m.max((a[i][j] - b[i][j]).abs());
            }
        }
        m
    }

    #[test]
    fn rodrigues_examples() {
        assert_eq!(aa_to_rotmat([0.0f64; 3]), identity::<f64>());
        let r = aa_to_rotmat([FRAC_PI_2, 0.0, 0.0]);
        let want = [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]];
        assert!(max_diff(&r, &want) < 1e-15);
        let tiny = aa_to_rotmat([1e-10, -2e-10, 0.0]);
        assert!(max_diff(&tiny, &identity()) < 1e-9);
    }

    #[test]
    fn rodrigues_matches_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let aa = random_aa(&mut rng, std::f64::consts::PI);
            let q = UnitQuaternion::from_scaled_axis(Vector3::new(aa[0], aa[1], aa[2]));
            let m = q.to_rotation_matrix();
            let want = [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ];
            assert!(max_diff(&aa_to_rotmat(aa), &want) < 1e-10);
        }
    }

    #[test]
    fn rodrigues_derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for scale in [1e-6, 1e-3, 0.5, 2.5] {
            let aa = random_aa(&mut rng, 1.0).map(|x| x * scale);
            let (_, grads) = aa_to_rotmat_with_grad(aa);
            for axis in 0..3 {
                let h = 1e-6;
                let (mut p, mut m) = (aa, aa);
                p[axis] += h;
                m[axis] -= h;
                let (rp, rm) = (aa_to_rotmat(p), aa_to_rotmat(m));
                for i in 0..3 {
                    for j in 0..3 {
                        let fd = (rp[i][j] - rm[i][j]) / (2.0 * h);
                        assert!((fd - grads[axis][i][j]).abs() < 1e-7, "scale {scale}");
                    }
                }
            }
        }
    }

    #[test]
    fn sixd_examples() {
        assert_eq!(rotmat_to_6d(&identity()), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(sixd_to_rotmat(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap(), identity::<f64>());
        assert!(matches!(
            sixd_to_rotmat(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(sixd_to_rotmat(&[0.0; 6]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn sixd_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let r = aa_to_rotmat(random_aa(&mut rng, std::f64::consts::PI));
            let back = sixd_to_rotmat(&rotmat_to_6d(&r)).unwrap();
            assert!(max_diff(&r, &back) < 1e-9);
        }
    }

    #[test]
    fn pose_144_packing() {
        let zero = pack_pose_144(&[0.0; 3], &[[0.0; 3]; 23]);
        assert_eq!(zero.len(), 144);
        for c in zero.chunks(6) {
            assert_eq!(c, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        }
        let v = pack_pose_144(&[FRAC_PI_2, 0.0, 0.0], &[[0.0; 3]; 23]);
        let want = rotmat_to_6d(&aa_to_rotmat([FRAC_PI_2, 0.0, 0.0]));
        assert_eq!(&v[..6], &want);
        for (a, b) in v[..6].iter().zip([1.0, 0.0, 0.0, 0.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(v[6..].chunks(6).all(|c| c == [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let mats = unpack_pose_144(&v).unwrap();
        assert_eq!(mats.len(), 24);
    }

    /// Independent oracle: the global transform of a joint is the ordered product of
    /// local transforms along its root chain, built as 4×4 homogeneous matrices.
    fn chain_oracle(p: &BodyParams, tmpl: &SkeletonTemplate, j: usize) -> Vec3<f64> {
        let mut chain = vec![j];
        while let Some(par) = tmpl.parent(*chain.last().unwrap()) {
            chain.push(par);
        }
        chain.reverse();
        let mut acc = nalgebra::Matrix4::<f64>::identity();
        for &k in &chain {
            let r = aa_to_rotmat(p.joint_rotation(k));
            let mut bone = nalgebra::Vector3::from(tmpl.rest_offsets[k]);
            for a in 0..3 {
                for b in 0..NUM_BETAS {
                    bone[a] += tmpl.shape_basis[k][a][b] * p.beta[b];
                }
            }
            if k == 0 {
                bone += nalgebra::Vector3::from(p.translation);
            }
            let mut m = nalgebra::Matrix4::<f64>::identity();
            for a in 0..3 {
                for b in 0..3 {
                    m[(a, b)] = r[a][b];
                }
                m[(a, 3)] = bone[a];
            }
            acc *= m;
        }
        [acc[(0, 3)], acc[(1, 3)], acc[(2, 3)]]
    }

    #[test]
    fn kinematics_rest_pose_and_translation() {
        let tmpl = SkeletonTemplate::standard();
        tmpl.validate().unwrap();
        let rest = forward_kinematics(&BodyParams::default(), &tmpl);
        for j in 0..NUM_JOINTS {
            let mut want = [0.0; 3];
            let mut k = Some(j);
            while let Some(i) = k {
                for a in 0..3 {
                    want[a] += tmpl.rest_offsets[i][a];
                }
                k = tmpl.parent(i);
            }
            for a in 0..3 {
                assert!((rest[j][a] - want[a]).abs() < 1e-9);
            }
        }
        let shifted = BodyParams {
            translation: [10.0, 0.0, 0.0],
            ..Default::default()
        };
        let moved = forward_kinematics(&shifted, &tmpl);
        for j in 0..NUM_JOINTS {
            assert!((moved[j][0] - rest[j][0] - 10.0).abs() < 1e-9);
            assert_eq!(moved[j][1], rest[j][1]);
        }
    }

    #[test]
    fn kinematics_matches_chain_oracle() {
        let tmpl = SkeletonTemplate::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut bent = BodyParams::default();
        bent.theta[17] = [0.0, 0.0, 1.1];
        for j in 0..NUM_JOINTS {
            let got = forward_kinematics(&bent, &tmpl)[j];
            let want = chain_oracle(&bent, &tmpl, j);
            for a in 0..3 {
                assert!((got[a] - want[a]).abs() < 1e-9);
            }
        }
        for _ in 0..20 {
            let mut p = BodyParams {
                translation: [rng.random_range(-500.0..500.0), 3.0, -7.0],
                rotation: random_aa(&mut rng, 3.0),
                ..Default::default()
            };
            for t in p.theta.iter_mut() {
                *t = random_aa(&mut rng, 1.0);
            }
            for b in p.beta.iter_mut() {
                *b = rng.random_range(-2.0..2.0);
            }
            let got = forward_kinematics(&p, &tmpl);
            for (j, g) in got.iter().enumerate() {
                let want = chain_oracle(&p, &tmpl, j);
                for a in 0..3 {
                    assert!((g[a] - want[a]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn kinematics_backward_matches_finite_differences() {
        let tmpl = SkeletonTemplate::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params: Vec<f64> = (0..PARAM_DIM)
            .map(|i| if i < 3 { rng.random_range(-100.0..100.0) } else { rng.random_range(-0.7..0.7) })
            .collect();
        let weights: Vec<f64> = (0..72).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |p: &[f64]| -> f64 {
            let st = fk_packed(p, &tmpl);
            st.joints.iter().flatten().zip(&weights).map(|(a, w)| a * w).sum()
        };
        let st = fk_packed(&params, &tmpl);
        let mut grad = vec![0.0; PARAM_DIM];
        fk_backward(&st, &tmpl, &weights, &mut grad);
        for i in 0..PARAM_DIM {
            let h = 1e-5;
            let (mut p, mut m) = (params.clone(), params.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err < 1e-6, "param {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn rigid_equivariance() {
        let tmpl = SkeletonTemplate::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = BodyParams::default();
        for t in p.theta.iter_mut() {
            *t = random_aa(&mut rng, 0.8);
        }
        p.rotation = random_aa(&mut rng, 1.0);
        let base_j = forward_kinematics(&p, &tmpl);
        let base_v = skin_vertices(&p, &tmpl);
        let delta = random_aa(&mut rng, 2.0);
        let dr = aa_to_rotmat(delta);
        let composed = mat_mul(&dr, &aa_to_rotmat(p.rotation));
        let q = nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_fn(|i, j| composed[i][j]));
        let sa = q.scaled_axis();
        let mut rotated = p.clone();
        rotated.rotation = [sa[0], sa[1], sa[2]];
        let rj = forward_kinematics(&rotated, &tmpl);
        for (a, b) in base_j.iter().zip(&rj) {
            let want = mat_vec(&dr, *a);
            for k in 0..3 {
                assert!((want[k] - b[k]).abs() < 1e-8);
            }
        }
        let rv = skin_vertices(&rotated, &tmpl);
        for (a, b) in base_v.iter().zip(&rv) {
            let want = mat_vec(&dr, *a);
            for k in 0..3 {
                assert!((want[k] - b[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn skinning_rest_and_explicit_oracle() {
        let tmpl = SkeletonTemplate::standard();
        let rest_j = forward_kinematics(&BodyParams::default(), &tmpl);
        let rest_v = skin_vertices(&BodyParams::default(), &tmpl);
        assert_eq!(rest_v.len(), DEFAULT_NUM_VERTICES);
        for (v, (off, &j)) in rest_v.iter().zip(tmpl.vertex_offsets.iter().zip(&tmpl.vertex_joints)) {
            for a in 0..3 {
                assert!((v[a] - (rest_j[j][a] + off[a])).abs() < 1e-9);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = BodyParams::default();
        for t in p.theta.iter_mut() {
            *t = random_aa(&mut rng, 1.0);
        }
        let verts = skin_vertices(&p, &tmpl);
        for (v, (off, &j)) in verts.iter().zip(tmpl.vertex_offsets.iter().zip(&tmpl.vertex_joints)) {
            // Oracle: global rotation as the ordered product along the chain.
            let mut chain = vec![j];
            while let Some(par) = tmpl.parent(*chain.last().unwrap()) {
                chain.push(par);
            }
            let mut g = identity();
            for &k in chain.iter().rev() {
                g = mat_mul(&g, &aa_to_rotmat(p.joint_rotation(k)));
            }
            let joint = chain_oracle(&p, &tmpl, j);
            let r = mat_vec(&g, *off);
            for a in 0..3 {
                assert!((v[a] - (joint[a] + r[a])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn weak_projection() {
        let cam = WeakPerspCam::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(project_weak(&cam, &[[3.0, 4.0, 7.0]]), vec![[3.0, 4.0]]);
        let cam = WeakPerspCam::new(2.0, 0.1, -0.3).unwrap();
        let uv = project_weak(&cam, &[[1.0, 1.0, 5.0]])[0];
        assert!((uv[0] - 2.1).abs() < 1e-15 && (uv[1] - 1.7).abs() < 1e-15);
        let pts = [[1.0, 2.0, 3.0], [-4.0, 0.5, 9.0], [0.0, 0.0, -1.0]];
        let batch = project_weak(&cam, &pts);
        for (p, b) in pts.iter().zip(&batch) {
            assert_eq!(project_weak(&cam, &[*p])[0], *b);
            // z is ignored
            assert_eq!(project_weak(&cam, &[[p[0], p[1], p[2] + 100.0]])[0], *b);
        }
        assert!(WeakPerspCam::new(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn half_turns_and_identity_invert() {
        assert_eq!(rotmat_to_aa(&identity()), [0.0; 3]);
        let pi = std::f64::consts::PI;
        for aa in [[pi, 0.0, 0.0], [0.0, pi, 0.0], [0.0, 0.0, pi]] {
            let back = rotmat_to_aa(&aa_to_rotmat(aa));
            assert!((0..3).all(|i| (back[i].abs() - aa[i]).abs() < 1e-9), "{back:?}");
        }
        let tiny = [1e-12, -2e-12, 3e-12];
        let back = rotmat_to_aa(&aa_to_rotmat(tiny));
        assert!((0..3).all(|i| (back[i] - tiny[i]).abs() < 1e-20));
    }

    #[test]
    fn params_pack_roundtrip_and_validation() {
        let v: Vec<f64> = (0..PARAM_DIM).map(|i| i as f64 * 0.01).collect();
        let p = BodyParams::unpack(&v).unwrap();
        assert_eq!(p.pack().to_vec(), v);
        assert!(BodyParams::unpack(&v[..80]).is_err());
        let mut bad = p.clone();
        bad.beta[3] = 6.0;
        assert!(bad.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]
            #[test]
            fn rotation_is_orthonormal(x in -6.0f64..6.0, y in -6.0f64..6.0, z in -6.0f64..6.0) {
                let r = aa_to_rotmat([x, y, z]);
                let rtr = mat_mul(&transpose(&r), &r);
                prop_assert!(max_diff(&rtr, &identity()) < 1e-9);
                prop_assert!((det3(&r) - 1.0).abs() < 1e-9);
                let back = sixd_to_rotmat(&rotmat_to_6d(&r)).unwrap();
                prop_assert!(max_diff(&back, &r) < 1e-9);
            }

            #[test]
            fn axis_angle_round_trips_through_matrix(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, angle in 0.0f64..3.1) {
                let n = norm3([x, y, z]);
                prop_assume!(n > 1e-3);
                let aa = [x / n * angle, y / n * angle, z / n * angle];
                let back = rotmat_to_aa(&aa_to_rotmat(aa));
                prop_assert!((0..3).all(|i| (back[i] - aa[i]).abs() < 1e-9), "{aa:?} -> {back:?}");
            }

            #[test]
            fn projection_is_affine_in_xy(s in 0.1f64..3.0, tx in -5.0f64..5.0, ty in -5.0f64..5.0,
                                          x in -10.0f64..10.0, y in -10.0f64..10.0, z1 in -10.0f64..10.0, z2 in -10.0f64..10.0) {
                let cam = WeakPerspCam::new(s, tx, ty).unwrap();
                let a = project_weak(&cam, &[[x, y, z1]])[0];
                let b = project_weak(&cam, &[[x, y, z2]])[0];
                prop_assert_eq!(a, b);
                let o = project_weak(&cam, &[[0.0, 0.0, 0.0]])[0];
                prop_assert!((a[0] - o[0] - s * x).abs() < 1e-12);
                prop_assert!((a[1] - o[1] - s * y).abs() < 1e-12);
            }
        }
    }
}
