//! Synthetic motion generation, dataset files and window sampling.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::body_model::{
    forward_kinematics, project_weak, BodyParams, SkeletonTemplate, Vec3, WeakPerspCam, CAM_DIM, NUM_BETAS,
    NUM_JOINTS, PARAM_DIM,
};
use crate::container::{Container, Section};
use crate::error::{Error, Result};
use crate::providers::ProviderData;
use crate::regressor::WindowScheduler;

pub const DATA_VERSION: &str = "sta-motion-data/1";

/// Knobs of the synthetic motion generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    /// Bound on the summed sinusoid amplitudes of every axis-angle component (rad).
    pub max_angle: f64,
    /// Shortest sinusoid period, in frames.
    pub min_period: f64,
    pub max_period: f64,
    /// Up to this many sinusoids per component.
    pub max_sinusoids: usize,
    /// Root translation stays within ±this many millimeters per axis.
    pub translation_range: f64,
    /// Frames between root-translation spline knots.
    pub knot_spacing: usize,
    pub beta_clip: f64,
    pub cam_scale_range: (f64, f64),
    pub cam_shift_range: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            max_angle: 0.8,
            min_period: 24.0,
            max_period: 96.0,
            max_sinusoids: 3,
            translation_range: 100.0,
            knot_spacing: 16,
            beta_clip: 3.0,
            cam_scale_range: (0.8, 1.2),
            cam_shift_range: 1.0,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("motion config: {m}")));
        if !(self.min_period >= 2.0) {
            return bad(format!("min_period {} is below 2 frames", self.min_period));
        }
        if !(self.max_period >= self.min_period) {
            return bad("max_period must be at least min_period".into());
        }
        if !(self.max_angle >= 0.0) || !(self.translation_range >= 0.0) {
            return bad("amplitudes must be non-negative".into());
        }
        if !(1..=3).contains(&self.max_sinusoids) {
            return bad("max_sinusoids must be 1, 2 or 3".into());
        }
        if self.knot_spacing == 0 {
            return bad("knot_spacing must be positive".into());
        }
        let (lo, hi) = self.cam_scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad("camera scale range must be positive".into());
        }
        if !(self.beta_clip >= 0.0 && self.beta_clip <= crate::body_model::MAX_ABS_BETA) {
            return bad("beta_clip outside [0, 5]".into());
        }
        Ok(())
    }

    /// Largest possible |second difference| of any rotation component:
    /// a sinusoid `A·sin(ωt+φ)` has second differences bounded by `4A·sin²(ω/2)`.
    pub fn rotation_accel_bound(&self) -> f64 {
        let half = (PI / self.min_period).min(PI / 2.0);
        4.0 * self.max_angle * half.sin().powi(2)
    }
}

/// Ground-truth motion of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub seq_id: String,
    pub params: Vec<BodyParams>,
    /// Joint positions (mm), `forward_kinematics(params[t])`.
    pub joints: Vec<[Vec3<f64>; NUM_JOINTS]>,
    /// `project_weak(cameras[t], joints[t])`.
    pub keypoints: Vec<[[f64; 2]; NUM_JOINTS]>,
    pub cameras: Vec<WeakPerspCam>,
    pub seed: u64,
    pub config: MotionConfig,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Builds a sequence from parameters and cameras, deriving joints and keypoints.
    pub fn from_params(
        seq_id: String,
        params: Vec<BodyParams>,
        cameras: Vec<WeakPerspCam>,
        tmpl: &SkeletonTemplate,
        seed: u64,
        config: MotionConfig,
    ) -> Result<Self> {
        if params.len() != cameras.len() {
            return Err(Error::Shape(format!(
                "{} frames of parameters but {} cameras",
                params.len(),
                cameras.len()
            )));
        }
        let joints: Vec<_> = params.iter().map(|p| forward_kinematics(p, tmpl)).collect();
        let keypoints = joints
            .iter()
            .zip(&cameras)
            .map(|(j, c)| {
                let mut out = [[0.0; 2]; NUM_JOINTS];
                out.copy_from_slice(&project_weak(c, j));
                out
            })
            .collect();
        Ok(Self {
            seq_id,
            params,
            joints,
            keypoints,
            cameras,
            seed,
            config,
        })
    }

    /// Joints with the root subtracted.
    pub fn root_relative_joints(&self) -> Vec<Vec<Vec3<f64>>> {
        self.joints.iter().map(|j| root_relative(j)).collect()
    }
}

pub fn root_relative(joints: &[Vec3<f64>]) -> Vec<Vec3<f64>> {
    let r = joints[0];
    joints.iter().map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]]).collect()
}

/// Per-sequence seed derived from the dataset seed.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

struct Sinusoid {
    amp: f64,
    omega: f64,
    phase: f64,
}

fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, u: f64) -> f64 {
    let u2 = u * u;
    let u3 = u2 * u;
    0.5 * (2.0 * p1 + (p2 - p0) * u + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u2 + (3.0 * (p1 - p2) + p3 - p0) * u3)
}

fn generate_one(seq_id: String, len: usize, seed: u64, cfg: &MotionConfig, tmpl: &SkeletonTemplate) -> Result<MotionSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut components: Vec<Vec<Sinusoid>> = Vec::with_capacity(3 * NUM_JOINTS);
    for _ in 0..3 * NUM_JOINTS {
        let m = rng.random_range(1..=cfg.max_sinusoids);
        let comps = (0..m)
            .map(|_| {
                let period = if cfg.max_period > cfg.min_period {
                    rng.random_range(cfg.min_period..=cfg.max_period)
                } else {
                    cfg.min_period
                };
                Sinusoid {
                    amp: cfg.max_angle * rng.random::<f64>() / m as f64,
                    omega: 2.0 * PI / period,
                    phase: rng.random_range(0.0..2.0 * PI),
                }
            })
            .collect();
        components.push(comps);
    }
    let n_knots = len / cfg.knot_spacing + 4;
    let knots: Vec<[f64; 3]> = (0..n_knots)
        .map(|_| {
            let mut k = [0.0; 3];
            for v in k.iter_mut() {
                *v = if cfg.translation_range > 0.0 {
                    rng.random_range(-cfg.translation_range..=cfg.translation_range)
                } else {
                    0.0
                };
            }
            k
        })
        .collect();
    let mut beta = [0.0; NUM_BETAS];
    for b in beta.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *b = round_f32(g.clamp(-cfg.beta_clip, cfg.beta_clip));
    }
    let (slo, shi) = cfg.cam_scale_range;
    let scale = if shi > slo { rng.random_range(slo..=shi) } else { slo };
    let shift = |rng: &mut ChaCha8Rng| {
        if cfg.cam_shift_range > 0.0 {
            round_f32(rng.random_range(-cfg.cam_shift_range..=cfg.cam_shift_range))
        } else {
            0.0
        }
    };
    let (tx, ty) = (shift(&mut rng), shift(&mut rng));
    let camera = WeakPerspCam::new(round_f32(scale), tx, ty)?;

    let mut params = Vec::with_capacity(len);
    for t in 0..len {
        let mut packed = [0.0; PARAM_DIM];
        let seg = t / cfg.knot_spacing;
        let u = (t % cfg.knot_spacing) as f64 / cfg.knot_spacing as f64;
        for a in 0..3 {
            let k = |i: usize| knots[seg + i][a];
            packed[a] = round_f32(catmull_rom(k(0), k(1), k(2), k(3), u).clamp(-cfg.translation_range, cfg.translation_range));
        }
        for (c, comps) in components.iter().enumerate() {
            let v: f64 = comps.iter().map(|s| s.amp * (s.omega * t as f64 + s.phase).sin()).sum();
            packed[3 + c] = round_f32(v);
        }
        packed[75..].copy_from_slice(&beta);
        params.push(BodyParams::unpack(&packed)?);
    }
    MotionSequence::from_params(seq_id, params, vec![camera; len], tmpl, seed, cfg.clone())
}

/// Generates `n_seqs` sequences of `len` frames with independent seeded streams.
///
/// All stored values are representable in 32 bits, so a dataset file round-trips exactly.
pub fn generate_synthetic(
    seed: u64,
    n_seqs: usize,
    len: usize,
    cfg: &MotionConfig,
    tmpl: &SkeletonTemplate,
) -> Result<Vec<MotionSequence>> {
    cfg.validate()?;
    if len < 3 {
        return Err(Error::TooShort(format!("sequences need at least 3 frames, asked for {len}")));
    }
    (0..n_seqs)
        .map(|i| generate_one(format!("seq{i:04}"), len, sequence_seed(seed, i), cfg, tmpl))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SequenceMeta {
    seq_id: String,
    length: usize,
    seed: u64,
    config: MotionConfig,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    template: SkeletonTemplate,
    sequences: Vec<SequenceMeta>,
}

/// Everything stored in one dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub template: SkeletonTemplate,
    pub sequences: Vec<MotionSequence>,
    pub providers: Option<ProviderData>,
}

impl DatasetFile {
    pub fn sequence(&self, seq_id: &str) -> Result<&MotionSequence> {
        self.sequences
            .iter()
            .find(|s| s.seq_id == seq_id)
            .ok_or_else(|| Error::UnknownSequence(seq_id.to_string()))
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = DatasetMeta {
            template: self.template.clone(),
            sequences: self
                .sequences
                .iter()
                .map(|s| SequenceMeta {
                    seq_id: s.seq_id.clone(),
                    length: s.len(),
                    seed: s.seed,
                    config: s.config.clone(),
                })
                .collect(),
        };
        let mut c = Container::new(DATA_VERSION, serde_json::to_value(meta)?);
        for s in &self.sequences {
            let n = s.len();
            let id = &s.seq_id;
            c.push(Section::from_f64(
                format!("seq/{id}/params"),
                vec![n, PARAM_DIM],
                s.params.iter().flat_map(|p| p.pack()),
            )?);
            c.push(Section::from_f64(
                format!("seq/{id}/camera"),
                vec![n, CAM_DIM],
                s.cameras.iter().flat_map(|c| c.pack()),
            )?);
            c.push(Section::from_f64(
                format!("seq/{id}/joints"),
                vec![n, NUM_JOINTS, 3],
                s.joints.iter().flatten().flatten().copied(),
            )?);
            c.push(Section::from_f64(
                format!("seq/{id}/keypoints"),
                vec![n, NUM_JOINTS, 2],
                s.keypoints.iter().flatten().flatten().copied(),
            )?);
        }
        if let Some(p) = &self.providers {
            p.write_sections(&mut c)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::CorruptSection {
            section: "manifest".into(),
            detail: e.to_string(),
        })?;
        meta.template.validate()?;
        let mut sequences = Vec::with_capacity(meta.sequences.len());
        for m in meta.sequences {
            let id = &m.seq_id;
            let n = m.length;
            let params_s = checked(c, &format!("seq/{id}/params"), &[n, PARAM_DIM])?;
            let cam_s = checked(c, &format!("seq/{id}/camera"), &[n, CAM_DIM])?;
            let joints_s = checked(c, &format!("seq/{id}/joints"), &[n, NUM_JOINTS, 3])?;
            let kp_s = checked(c, &format!("seq/{id}/keypoints"), &[n, NUM_JOINTS, 2])?;
            let params = params_s
                .to_f64()
                .chunks(PARAM_DIM)
                .map(BodyParams::unpack)
                .collect::<Result<Vec<_>>>()?;
            let cameras = cam_s
                .to_f64()
                .chunks(CAM_DIM)
                .map(WeakPerspCam::from_slice)
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::CorruptSection {
                    section: cam_s.name.clone(),
                    detail: e.to_string(),
                })?;
            let seq = MotionSequence::from_params(m.seq_id.clone(), params, cameras, &meta.template, m.seed, m.config)?;
            // Derived sections must agree with the recomputation.
            let joints_ok = seq.joints.iter().flatten().flatten().zip(&joints_s.data).all(|(&a, &b)| a as f32 == b);
            let kp_ok = seq.keypoints.iter().flatten().flatten().zip(&kp_s.data).all(|(&a, &b)| a as f32 == b);
            if !joints_ok {
                return Err(Error::CorruptSection {
                    section: joints_s.name.clone(),
                    detail: "joints disagree with kinematics of the stored parameters".into(),
                });
            }
            if !kp_ok {
                return Err(Error::CorruptSection {
                    section: kp_s.name.clone(),
                    detail: "keypoints disagree with the projection of the joints".into(),
                });
            }
            sequences.push(seq);
        }
        let providers = ProviderData::read_sections(c)?;
        Ok(Self {
            template: meta.template,
            sequences,
            providers,
        })
    }
}

fn checked<'a>(c: &'a Container, name: &str, shape: &[usize]) -> Result<&'a Section> {
    let s = c.section(name)?;
    if s.shape != shape {
        return Err(Error::CorruptSection {
            section: name.to_string(),
            detail: format!("shape {:?}, expected {shape:?}", s.shape),
        });
    }
    Ok(s)
}

pub fn save_dataset(path: &Path, data: &DatasetFile) -> Result<()> {
    data.to_container()?.save(path)
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    DatasetFile::from_container(&Container::load(path, DATA_VERSION)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowMode {
    /// Non-overlapping windows; the tail remainder is dropped.
    Train,
    /// Stride-`S` windows with a final tail-aligned window.
    Infer { stride: usize },
}

pub fn sample_windows(n: usize, window: usize, mode: WindowMode) -> Result<Vec<Range<usize>>> {
    let stride = match mode {
        WindowMode::Train => window,
        WindowMode::Infer { stride } => stride,
    };
    let sched = WindowScheduler::new(window, stride)?;
    let starts = match mode {
        WindowMode::Train => {
            if n < window {
                return Err(Error::TooShort(format!("{n} frames, window {window}")));
            }
            (0..n / window).map(|k| k * window).collect()
        }
        WindowMode::Infer { .. } => sched.starts(n)?,
    };
    Ok(starts.into_iter().map(|s| s..s + window).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::acc_err;

    fn tmpl() -> SkeletonTemplate {
        SkeletonTemplate::standard()
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = MotionConfig::default();
        let a = generate_synthetic(7, 3, 40, &cfg, &tmpl()).unwrap();
        let b = generate_synthetic(7, 3, 40, &cfg, &tmpl()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(8, 3, 40, &cfg, &tmpl()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_amplitude_is_static_rest_pose() {
        let cfg = MotionConfig {
            max_angle: 0.0,
            translation_range: 0.0,
            ..Default::default()
        };
        let seqs = generate_synthetic(1, 1, 20, &cfg, &tmpl()).unwrap();
        let s = &seqs[0];
        assert!(s.params.iter().all(|p| p.rotation == [0.0; 3] && p.theta.iter().all(|r| *r == [0.0; 3])));
        let j = s.root_relative_joints();
        assert_eq!(acc_err(&j, &j).unwrap(), 0.0);
        assert!(j.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn rotation_accelerations_respect_analytic_bound() {
        let cfg = MotionConfig {
            min_period: 8.0,
            max_period: 20.0,
            ..Default::default()
        };
        let bound = cfg.rotation_accel_bound();
        let seqs = generate_synthetic(3, 4, 80, &cfg, &tmpl()).unwrap();
        let mut worst: f64 = 0.0;
        for s in &seqs {
            let packed: Vec<_> = s.params.iter().map(|p| p.pack()).collect();
            for t in 1..packed.len() - 1 {
                for c in 3..75 {
                    let a = packed[t + 1][c] - 2.0 * packed[t][c] + packed[t - 1][c];
                    worst = worst.max(a.abs());
                }
            }
        }
        // f32 rounding of stored angles adds at most 4 half-ulps.
        assert!(worst <= bound + 4.0 * f32::EPSILON as f64, "{worst} > {bound}");
        assert!(worst > 0.2 * bound);
    }

    #[test]
    fn invalid_period_is_rejected() {
        let cfg = MotionConfig {
            min_period: 1.5,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(0, 1, 20, &cfg, &tmpl()), Err(Error::Config(_))));
    }

    #[test]
    fn sequences_satisfy_exactness_invariants() {
        let t = tmpl();
        let seqs = generate_synthetic(11, 2, 24, &MotionConfig::default(), &t).unwrap();
        for s in &seqs {
            for i in 0..s.len() {
                assert_eq!(s.joints[i], forward_kinematics(&s.params[i], &t));
                let kp = project_weak(&s.cameras[i], &s.joints[i]);
                assert_eq!(&s.keypoints[i][..], &kp[..]);
                assert!(s.params[i].beta.iter().all(|b| b.abs() <= 3.0));
            }
        }
    }

    #[test]
    fn train_windows() {
        assert_eq!(sample_windows(48, 16, WindowMode::Train).unwrap(), vec![0..16, 16..32, 32..48]);
        assert_eq!(sample_windows(40, 16, WindowMode::Train).unwrap(), vec![0..16, 16..32]);
        assert!(sample_windows(10, 16, WindowMode::Train).is_err());
    }

    #[test]
    fn infer_windows_cover_every_frame() {
        let w = sample_windows(30, 16, WindowMode::Infer { stride: 14 }).unwrap();
        assert_eq!(w, vec![0..16, 14..30]);
        // Brute-force coverage: frames 14 and 15 are seen twice, everything else once.
        let mut cover = [0usize; 30];
        for r in &w {
            for f in r.clone() {
                cover[f] += 1;
            }
        }
        for (f, c) in cover.iter().enumerate() {
            assert_eq!(*c, if f == 14 || f == 15 { 2 } else { 1 });
        }
    }
}
