//! Per-frame body-aware features and pose/camera initializations.
//!
//! [`SyntheticProvider`] derives both from ground truth; [`ProviderData`] holds
//! precomputed values loaded from a file. Consumers only see [`FrameProvider`].

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyParams, WeakPerspCam, CAM_DIM, PARAM_DIM};
use crate::container::{Container, Section};
use crate::dataio::{sequence_seed, MotionSequence, DATA_VERSION};
use crate::error::{Error, Result};

pub const CHANNELS: usize = 16;
/// Grid side used for the surrogate encoder; larger grids are upsampled from it.
pub const BASE_GRID: usize = 8;

/// Body-aware feature grid of one frame, `G×G×16`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeature {
    pub grid: Vec<f32>,
    pub g: usize,
    pub frame_index: usize,
}

impl FrameFeature {
    pub fn zeros(g: usize, frame_index: usize) -> Self {
        Self {
            grid: vec![0.0; g * g * CHANNELS],
            g,
            frame_index,
        }
    }

    /// Flattened grid when `G ≤ 8`, otherwise adaptive average pooling to `8×8×16`.
    pub fn embedding_input(&self) -> Vec<f32> {
        if self.g <= BASE_GRID {
            return self.grid.clone();
        }
        pool_grid(&self.grid, self.g, BASE_GRID)
    }
}

/// Input width of the feature embedding for a grid of side `g`.
pub fn embedding_input_dim(g: usize) -> usize {
    let side = g.min(BASE_GRID);
    side * side * CHANNELS
}

/// Adaptive average pooling of a `g×g×16` grid to `target×target×16`.
pub fn pool_grid(grid: &[f32], g: usize, target: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; target * target * CHANNELS];
    let bin = |i: usize| (i * g / target, ((i + 1) * g).div_ceil(target));
    for bi in 0..target {
        let (r0, r1) = bin(bi);
        for bj in 0..target {
            let (c0, c1) = bin(bj);
            let mut acc = [0.0f64; CHANNELS];
            for r in r0..r1 {
                for c in c0..c1 {
                    let cell = &grid[(r * g + c) * CHANNELS..(r * g + c + 1) * CHANNELS];
                    acc.iter_mut().zip(cell).for_each(|(a, &v)| *a += v as f64);
                }
            }
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            let o = (bi * target + bj) * CHANNELS;
            for (k, a) in acc.iter().enumerate() {
                out[o + k] = (a / n) as f32;
            }
        }
    }
    out
}

/// Stand-in for one frame of the per-frame pose and camera regressor.
#[derive(Clone, Debug, PartialEq)]
pub struct InitEstimate {
    pub theta_init: BodyParams,
    pub omega_init: WeakPerspCam,
}

impl InitEstimate {
    pub fn pack(&self) -> [f64; PARAM_DIM + CAM_DIM] {
        let mut out = [0.0; PARAM_DIM + CAM_DIM];
        out[..PARAM_DIM].copy_from_slice(&self.theta_init.pack());
        out[PARAM_DIM..].copy_from_slice(&self.omega_init.pack());
        out
    }

    pub fn unpack(v: &[f64]) -> Result<Self> {
        if v.len() != PARAM_DIM + CAM_DIM {
            return Err(Error::Shape(format!("init estimate needs 88 values, got {}", v.len())));
        }
        Ok(Self {
            theta_init: BodyParams::unpack(&v[..PARAM_DIM])?,
            omega_init: WeakPerspCam::from_slice(&v[PARAM_DIM..])?,
        })
    }
}

/// Frames (and optionally grid cells) hidden from the feature provider.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OcclusionMask {
    pub frames: Vec<bool>,
    /// Per frame, `G·G` flags; `true` zeroes that cell.
    pub cells: Option<Vec<Vec<bool>>>,
}

impl OcclusionMask {
    pub fn none(n: usize) -> Self {
        Self {
            frames: vec![false; n],
            cells: None,
        }
    }

    fn validate(&self, n: usize, g: usize) -> Result<()> {
        if self.frames.len() != n {
            return Err(Error::Shape(format!("mask covers {} frames, sequence has {n}", self.frames.len())));
        }
        if let Some(cells) = &self.cells {
            if cells.len() != n || cells.iter().any(|c| c.len() != g * g) {
                return Err(Error::Shape(format!("cell mask must be {n} × {}", g * g)));
            }
        }
        Ok(())
    }
}

/// Interchangeable source of per-frame inputs.
pub trait FrameProvider: Send + Sync {
    fn grid(&self) -> usize;
    fn features(&self, seq: &MotionSequence) -> Result<Vec<FrameFeature>>;
    fn inits(&self, seq: &MotionSequence) -> Result<Vec<InitEstimate>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub grid: usize,
    pub seed: u64,
    pub feature_sigma: f64,
    pub pose_sigma: f64,
    pub cam_sigma: f64,
    /// Multiplier of the surrogate encoder's projection.
    pub feature_gain: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            seed: 0,
            feature_sigma: 0.1,
            pose_sigma: 0.05,
            cam_sigma: 0.02,
            feature_gain: 4.0,
        }
    }
}

/// Ground truth plus noise: features are a fixed seeded linear map of the body
/// parameters and camera, initializations are perturbed parameters.
pub struct SyntheticProvider {
    pub config: SyntheticConfig,
    /// `[input × output]`, row-major.
    projection: Vec<f64>,
    input_dim: usize,
    base_dim: usize,
}

impl SyntheticProvider {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        if config.grid == 0 {
            return Err(Error::Config("feature grid must be at least 1".into()));
        }
        for (name, v) in [
            ("feature_sigma", config.feature_sigma),
            ("pose_sigma", config.pose_sigma),
            ("cam_sigma", config.cam_sigma),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        let input_dim = PARAM_DIM + CAM_DIM;
        let side = config.grid.min(BASE_GRID);
        let base_dim = side * side * CHANNELS;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = config.feature_gain / (input_dim as f64).sqrt();
        let projection = (0..input_dim * base_dim)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Ok(Self {
            config,
            projection,
            input_dim,
            base_dim,
        })
    }

    fn noise_rng(&self, seq: &MotionSequence, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(self.config.seed, seq.seed as usize));
        rng.set_stream(stream);
        rng
    }

    /// What the surrogate encoder sees: parameters (translation in meters) and camera.
    fn observation(&self, seq: &MotionSequence, t: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.input_dim);
        for (k, v) in seq.params[t].pack().iter().enumerate() {
            x.push(if k < 3 { v / 1000.0 } else { *v });
        }
        x.extend(seq.cameras[t].pack());
        x
    }

    fn clean_base(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.base_dim];
        for (xi, row) in x.iter().zip(self.projection.chunks(self.base_dim)) {
            out.iter_mut().zip(row).for_each(|(o, &m)| *o += xi * m);
        }
        out
    }

    pub fn features_masked(&self, seq: &MotionSequence, mask: &OcclusionMask) -> Result<Vec<FrameFeature>> {
        let g = self.config.grid;
        mask.validate(seq.len(), g)?;
        let noise = Normal::new(0.0, self.config.feature_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = self.noise_rng(seq, 1);
        let mut out = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            let base = self.clean_base(&self.observation(seq, t));
            let mut grid = if g <= BASE_GRID {
                base
            } else {
                let mut up = vec![0.0; g * g * CHANNELS];
                for r in 0..g {
                    for c in 0..g {
                        let src = ((r * BASE_GRID / g) * BASE_GRID + c * BASE_GRID / g) * CHANNELS;
                        up[(r * g + c) * CHANNELS..(r * g + c + 1) * CHANNELS]
                            .copy_from_slice(&base[src..src + CHANNELS]);
                    }
                }
                up
            };
            if self.config.feature_sigma > 0.0 {
                grid.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            if mask.frames[t] {
                grid.iter_mut().for_each(|v| *v = 0.0);
            } else if let Some(cells) = &mask.cells {
                for (cell, _) in cells[t].iter().enumerate().filter(|(_, &m)| m) {
                    grid[cell * CHANNELS..(cell + 1) * CHANNELS].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            out.push(FrameFeature {
                grid: grid.into_iter().map(|v| v as f32).collect(),
                g,
                frame_index: t,
            });
        }
        Ok(out)
    }
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl FrameProvider for SyntheticProvider {
    fn grid(&self) -> usize {
        self.config.grid
    }

    fn features(&self, seq: &MotionSequence) -> Result<Vec<FrameFeature>> {
        self.features_masked(seq, &OcclusionMask::none(seq.len()))
    }

    fn inits(&self, seq: &MotionSequence) -> Result<Vec<InitEstimate>> {
        let pose = Normal::new(0.0, self.config.pose_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let cam = Normal::new(0.0, self.config.cam_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = self.noise_rng(seq, 2);
        let mut out = Vec::with_capacity(seq.len());
        for (p, c) in seq.params.iter().zip(&seq.cameras) {
            let mut packed = p.pack();
            // Rotations and shape are perturbed; the root translation is passed through.
            for v in packed[3..].iter_mut() {
                if self.config.pose_sigma > 0.0 {
                    *v = round_f32(*v + pose.sample(&mut rng));
                }
            }
            let mut w = c.pack();
            if self.config.cam_sigma > 0.0 {
                for v in w.iter_mut() {
                    *v = round_f32(*v + cam.sample(&mut rng));
                }
            }
            w[0] = w[0].max(round_f32(0.01));
            out.push(InitEstimate {
                theta_init: BodyParams::unpack(&packed)?,
                omega_init: WeakPerspCam::from_slice(&w)?,
            });
        }
        Ok(out)
    }
}

/// Features derived from a sequence with the default synthetic encoder.
pub fn synth_features(
    seq: &MotionSequence,
    seed: u64,
    noise_sigma: f64,
    mask: &OcclusionMask,
    grid: usize,
) -> Result<Vec<FrameFeature>> {
    let cfg = SyntheticConfig {
        grid,
        seed,
        feature_sigma: noise_sigma,
        ..Default::default()
    };
    SyntheticProvider::new(cfg)?.features_masked(seq, mask)
}

pub fn synth_init(
    seq: &MotionSequence,
    seed: u64,
    pose_noise_sigma: f64,
    cam_noise_sigma: f64,
) -> Result<Vec<InitEstimate>> {
    let cfg = SyntheticConfig {
        seed,
        pose_sigma: pose_noise_sigma,
        cam_sigma: cam_noise_sigma,
        ..Default::default()
    };
    SyntheticProvider::new(cfg)?.inits(seq)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProviderEntry {
    pub seq_id: String,
    pub features: Vec<FrameFeature>,
    pub inits: Vec<InitEstimate>,
}

/// Precomputed provider outputs for a set of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct ProviderData {
    pub grid: usize,
    pub entries: Vec<ProviderEntry>,
}

#[derive(Serialize, Deserialize)]
struct ProviderSeqMeta {
    seq_id: String,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct ProviderMeta {
    grid: usize,
    sequences: Vec<ProviderSeqMeta>,
}

fn mismatch(section: &str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        section: section.to_string(),
        detail: detail.into(),
    }
}

impl ProviderData {
    pub fn from_provider(provider: &dyn FrameProvider, seqs: &[MotionSequence]) -> Result<Self> {
        let entries = seqs
            .iter()
            .map(|s| {
                Ok(ProviderEntry {
                    seq_id: s.seq_id.clone(),
                    features: provider.features(s)?,
                    inits: provider.inits(s)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            grid: provider.grid(),
            entries,
        })
    }

    pub fn entry(&self, seq_id: &str) -> Result<&ProviderEntry> {
        self.entries
            .iter()
            .find(|e| e.seq_id == seq_id)
            .ok_or_else(|| Error::UnknownSequence(seq_id.to_string()))
    }

    /// Adds the `features` and `inits` sections and a `providers` manifest entry.
    pub fn write_sections(&self, c: &mut Container) -> Result<()> {
        let g = self.grid;
        let meta = ProviderMeta {
            grid: g,
            sequences: self
                .entries
                .iter()
                .map(|e| ProviderSeqMeta {
                    seq_id: e.seq_id.clone(),
                    length: e.features.len(),
                })
                .collect(),
        };
        match c.meta.as_object_mut() {
            Some(obj) => {
                obj.insert("providers".into(), serde_json::to_value(meta)?);
            }
            None => c.meta = serde_json::json!({ "providers": meta }),
        }
        let total: usize = self.entries.iter().map(|e| e.features.len()).sum();
        let mut feats = Vec::with_capacity(total * g * g * CHANNELS);
        let mut inits = Vec::with_capacity(total * (PARAM_DIM + CAM_DIM));
        for e in &self.entries {
            if e.inits.len() != e.features.len() {
                return Err(Error::Shape(format!("`{}`: features and inits differ in length", e.seq_id)));
            }
            for f in &e.features {
                if f.g != g || f.grid.len() != g * g * CHANNELS {
                    return Err(mismatch("features", format!("frame grid {} in a G={g} file", f.g)));
                }
                feats.extend_from_slice(&f.grid);
            }
            for i in &e.inits {
                inits.extend(i.pack().iter().map(|&v| v as f32));
            }
        }
        c.push(Section::new("features", vec![total, g, g, CHANNELS], feats)?);
        c.push(Section::new("inits", vec![total, PARAM_DIM + CAM_DIM], inits)?);
        Ok(())
    }

    /// Reads provider sections if the container has them.
    pub fn read_sections(c: &Container) -> Result<Option<Self>> {
        let Some(meta) = c.meta.get("providers") else {
            return Ok(None);
        };
        let meta: ProviderMeta =
            serde_json::from_value(meta.clone()).map_err(|e| mismatch("manifest", e.to_string()))?;
        let g = meta.grid;
        let total: usize = meta.sequences.iter().map(|s| s.length).sum();
        let feats = c.section("features")?;
        if feats.shape != [total, g, g, CHANNELS] {
            return Err(mismatch(
                "features",
                format!("header says {total} frames of G={g}, section is {:?}", feats.shape),
            ));
        }
        let inits = c.section("inits")?;
        if inits.shape != [total, PARAM_DIM + CAM_DIM] {
            return Err(mismatch("inits", format!("expected [{total}, 88], got {:?}", inits.shape)));
        }
        let per = g * g * CHANNELS;
        let mut entries = Vec::with_capacity(meta.sequences.len());
        let mut frame = 0;
        for s in meta.sequences {
            let features = (0..s.length)
                .map(|t| FrameFeature {
                    grid: feats.data[(frame + t) * per..(frame + t + 1) * per].to_vec(),
                    g,
                    frame_index: t,
                })
                .collect();
            let inits = (0..s.length)
                .map(|t| {
                    let row = &inits.data[(frame + t) * 88..(frame + t + 1) * 88];
                    InitEstimate::unpack(&row.iter().map(|&v| v as f64).collect::<Vec<_>>())
                        .map_err(|e| mismatch("inits", e.to_string()))
                })
                .collect::<Result<_>>()?;
            frame += s.length;
            entries.push(ProviderEntry {
                seq_id: s.seq_id,
                features,
                inits,
            });
        }
        Ok(Some(Self { grid: g, entries }))
    }
}

impl FrameProvider for ProviderData {
    fn grid(&self) -> usize {
        self.grid
    }

    fn features(&self, seq: &MotionSequence) -> Result<Vec<FrameFeature>> {
        let e = self.entry(&seq.seq_id)?;
        if e.features.len() != seq.len() {
            return Err(mismatch("features", format!("`{}` has {} frames", seq.seq_id, e.features.len())));
        }
        Ok(e.features.clone())
    }

    fn inits(&self, seq: &MotionSequence) -> Result<Vec<InitEstimate>> {
        let e = self.entry(&seq.seq_id)?;
        if e.inits.len() != seq.len() {
            return Err(mismatch("inits", format!("`{}` has {} frames", seq.seq_id, e.inits.len())));
        }
        Ok(e.inits.clone())
    }
}

pub fn save_precomputed(path: &Path, data: &ProviderData) -> Result<()> {
    let mut c = Container::new(DATA_VERSION, serde_json::json!({}));
    data.write_sections(&mut c)?;
    c.save(path)
}

/// Loads a provider export. Structural damage (truncation, inconsistent shapes)
/// is reported as a shape mismatch.
pub fn load_precomputed(path: &Path) -> Result<ProviderData> {
    let c = Container::load(path, DATA_VERSION).map_err(|e| match e {
        Error::CorruptSection { section, detail } => Error::ShapeMismatch { section, detail },
        other => other,
    })?;
    match ProviderData::read_sections(&c) {
        Ok(Some(p)) => Ok(p),
        Ok(None) => Err(mismatch("manifest", "no provider sections")),
        Err(Error::CorruptSection { section, detail }) => Err(Error::ShapeMismatch { section, detail }),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, MotionConfig};
    use crate::body_model::SkeletonTemplate;

    fn setup() -> (SkeletonTemplate, Vec<MotionSequence>) {
        let t = SkeletonTemplate::standard();
        let seqs = generate_synthetic(5, 2, 20, &MotionConfig::default(), &t).unwrap();
        (t, seqs)
    }

    #[test]
    fn identical_poses_give_identical_features() {
        let (t, seqs) = setup();
        let mut s = seqs[0].clone();
        s.params[3] = s.params[1].clone();
        s.cameras[3] = s.cameras[1];
        let s = MotionSequence::from_params(s.seq_id, s.params, s.cameras, &t, s.seed, s.config).unwrap();
        let f = synth_features(&s, 1, 0.0, &OcclusionMask::none(s.len()), 8).unwrap();
        assert_eq!(f[1].grid, f[3].grid);
        assert_ne!(f[1].grid, f[2].grid);
    }

    #[test]
    fn masked_frames_and_cells_are_zero() {
        let (_, seqs) = setup();
        let s = &seqs[0];
        let mut mask = OcclusionMask::none(s.len());
        mask.frames[2] = true;
        let mut cells = vec![vec![false; 64]; s.len()];
        cells[4][10] = true;
        mask.cells = Some(cells);
        let f = synth_features(s, 1, 0.1, &mask, 8).unwrap();
        assert!(f[2].grid.iter().all(|&v| v == 0.0));
        assert!(f[4].grid[160..176].iter().all(|&v| v == 0.0));
        assert!(f[4].grid[176..192].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn seeded_outputs_are_reproducible() {
        let (_, seqs) = setup();
        let s = &seqs[1];
        let m = OcclusionMask::none(s.len());
        assert_eq!(synth_features(s, 3, 0.1, &m, 8).unwrap(), synth_features(s, 3, 0.1, &m, 8).unwrap());
        assert_eq!(synth_init(s, 3, 0.05, 0.02).unwrap(), synth_init(s, 3, 0.05, 0.02).unwrap());
        assert_ne!(synth_init(s, 3, 0.05, 0.02).unwrap(), synth_init(s, 4, 0.05, 0.02).unwrap());
    }

    #[test]
    fn zero_noise_init_equals_ground_truth() {
        let (_, seqs) = setup();
        let s = &seqs[0];
        let inits = synth_init(s, 0, 0.0, 0.0).unwrap();
        for (i, p) in inits.iter().zip(&s.params) {
            assert_eq!(&i.theta_init, p);
        }
        let noisy = synth_init(s, 0, 0.05, 0.02).unwrap();
        assert!(noisy.iter().zip(&s.params).all(|(i, p)| i.theta_init != *p));
        assert!(noisy.iter().all(|i| i.omega_init.scale > 0.01 - 1e-9));
    }

    #[test]
    fn large_grids_pool_back_to_the_base_grid() {
        let (_, seqs) = setup();
        let s = &seqs[0];
        let m = OcclusionMask::none(s.len());
        let small = synth_features(s, 2, 0.0, &m, 8).unwrap();
        let big = synth_features(s, 2, 0.0, &m, 112).unwrap();
        assert_eq!(big[0].grid.len(), 112 * 112 * 16);
        assert_eq!(big[0].embedding_input(), small[0].embedding_input());
        assert_eq!(embedding_input_dim(112), 1024);
        assert_eq!(embedding_input_dim(4), 256);
    }

    #[test]
    fn precomputed_round_trip_and_errors() {
        let (_, seqs) = setup();
        let p = SyntheticProvider::new(SyntheticConfig::default()).unwrap();
        let data = ProviderData::from_provider(&p, &seqs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prov.bin");
        save_precomputed(&path, &data).unwrap();
        assert_eq!(load_precomputed(&path).unwrap(), data);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(load_precomputed(&path), Err(Error::ShapeMismatch { .. })));

        let mut c = Container::new(DATA_VERSION, serde_json::json!({}));
        data.write_sections(&mut c).unwrap();
        c.meta["providers"]["grid"] = serde_json::json!(112);
        c.save(&path).unwrap();
        assert!(matches!(load_precomputed(&path), Err(Error::ShapeMismatch { .. })));

        assert!(matches!(
            load_precomputed(&dir.path().join("absent.bin")),
            Err(Error::MissingFile(_))
        ));
        let mut c = Container::new("sta-motion-data/0", serde_json::json!({}));
        data.write_sections(&mut c).unwrap();
        c.save(&path).unwrap();
        assert!(matches!(load_precomputed(&path), Err(Error::VersionMismatch { .. })));
    }
}
