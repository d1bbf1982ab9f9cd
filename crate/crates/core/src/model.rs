//! The full regressor: STA, coarse head and temporal refinement, plus checkpoints.

use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::body_model::{pack_pose_144, CAM_DIM, PARAM_DIM, POSE6D_DIM};
use crate::config::ModelConfig;
use crate::container::{Container, Section};
use crate::dataio::MotionSequence;
use crate::error::{Error, Result};
use crate::numerics::{Array, ParamStore, Real, Tape, Var};
use crate::providers::{embedding_input_dim, FrameFeature, InitEstimate};
use crate::regressor::{CoarseHead, FeatureLstm, RefinerLstm, STATE_DIM};
use crate::sta::{Sta, StaInputs, StaTrace};

pub const CHECKPOINT_VERSION: &str = "sta-motion-ckpt/1";
/// The network carries the root translation in meters; body-model space is millimeters.
pub const TRANSLATION_SCALE: f64 = 1000.0;

/// Per-frame network inputs of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceInputs {
    pub features: Vec<Vec<f32>>,
    pub pose144: Vec<Vec<f64>>,
    pub omega: Vec<[f64; CAM_DIM]>,
    /// Packed `Θ^init` (millimeters) for baseline comparisons.
    pub theta_init: Vec<[f64; PARAM_DIM]>,
}

impl SequenceInputs {
    pub fn new(features: &[FrameFeature], inits: &[InitEstimate]) -> Result<Self> {
        if features.len() != inits.len() {
            return Err(Error::Shape(format!("{} feature frames but {} inits", features.len(), inits.len())));
        }
        Ok(Self {
            features: features.iter().map(FrameFeature::embedding_input).collect(),
            pose144: inits
                .iter()
                .map(|i| pack_pose_144(&i.theta_init.rotation, &i.theta_init.theta))
                .collect(),
            omega: inits.iter().map(|i| i.omega_init.pack()).collect(),
            theta_init: inits.iter().map(|i| i.theta_init.pack()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Stacks the given frame ranges, in order, into batch arrays.
    pub fn batch<T: Real>(&self, ranges: &[Range<usize>]) -> Result<BatchInputs<T>> {
        BatchInputs::stack(&ranges.iter().map(|r| (self, r.clone())).collect::<Vec<_>>())
    }
}

/// Stacked inputs of `B` windows, `[B·W × d]` each.
#[derive(Clone, Debug)]
pub struct BatchInputs<T> {
    pub window: usize,
    pub features: Array<T>,
    pub pose144: Array<T>,
    pub omega: Array<T>,
}

impl<T: Real> BatchInputs<T> {
    pub fn stack(parts: &[(&SequenceInputs, Range<usize>)]) -> Result<Self> {
        let Some((first, r0)) = parts.first() else {
            return Err(Error::EmptyWindow);
        };
        let window = r0.len();
        if window == 0 {
            return Err(Error::EmptyWindow);
        }
        let dg = first.features.first().map_or(0, Vec::len);
        let rows = parts.len() * window;
        let (mut f, mut p, mut o) = (
            Vec::with_capacity(rows * dg),
            Vec::with_capacity(rows * POSE6D_DIM),
            Vec::with_capacity(rows * CAM_DIM),
        );
        for (seq, r) in parts {
            if r.len() != window || r.end > seq.len() {
                return Err(Error::Shape(format!("window {r:?} in a batch of width {window} over {} frames", seq.len())));
            }
            for t in r.clone() {
                if seq.features[t].len() != dg {
                    return Err(Error::Shape("feature width differs within a batch".into()));
                }
                f.extend(seq.features[t].iter().map(|&v| T::lit(v as f64)));
                p.extend(seq.pose144[t].iter().map(|&v| T::lit(v)));
                o.extend(seq.omega[t].iter().map(|&v| T::lit(v)));
            }
        }
        Ok(Self {
            window,
            features: Array::new(vec![rows, dg], f)?,
            pose144: Array::new(vec![rows, POSE6D_DIM], p)?,
            omega: Array::new(vec![rows, CAM_DIM], o)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.features.rows()
    }
}

/// Mean `[Θ | ω]` over all frames, translation in meters.
pub fn mean_state(seqs: &[MotionSequence]) -> Result<[f64; STATE_DIM]> {
    let mut sum = [0.0; STATE_DIM];
    let mut n = 0usize;
    for s in seqs {
        for (p, c) in s.params.iter().zip(&s.cameras) {
            let packed = p.pack();
            for (k, v) in packed.iter().enumerate() {
                sum[k] += if k < 3 { v / TRANSLATION_SCALE } else { *v };
            }
            for (k, v) in c.pack().iter().enumerate() {
                sum[PARAM_DIM + k] += v;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::TooShort("no frames to average".into()));
    }
    sum.iter_mut().for_each(|v| *v /= n as f64);
    Ok(sum)
}

/// Intermediate and final values of one forward pass; parameters in network units.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub sta: StaTrace,
    /// Features seen by the coarse head.
    pub head_input: Var,
    pub theta_coarse: Var,
    pub theta_res: Option<Var>,
    pub theta_pred: Var,
    pub omega: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub sta: Sta,
    pub head: CoarseHead,
    pub refiner: Option<RefinerLstm>,
    pub feature_lstm: Option<FeatureLstm>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, mean: &[f64; STATE_DIM]) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let sta = Sta::new(&mut store, &config, &mut rng)?;
        let head = CoarseHead::new(
            &mut store,
            config.feature_dim,
            config.head_hidden,
            config.head_iterations,
            config.head_activation,
            mean,
            &mut rng,
        )?;
        let f = config.flags;
        let (refiner, feature_lstm) = if f.no_lstm {
            (None, None)
        } else if f.lstm_on_features {
            let l = FeatureLstm::new(&mut store, config.feature_dim, config.lstm_hidden, config.lstm_layers, &mut rng)?;
            (None, Some(l))
        } else {
            let l = RefinerLstm::new(&mut store, config.feature_dim, config.lstm_hidden, config.lstm_layers, &mut rng)?;
            (Some(l), None)
        };
        Ok(Self {
            config,
            store,
            sta,
            head,
            refiner,
            feature_lstm,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, batch: &BatchInputs<T>) -> Result<ForwardOutput> {
        self.forward_with(tape, &self.store, batch)
    }

    /// Forward pass reading parameters from `store`, which must share this model's layout.
    pub fn forward_with(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &BatchInputs<T>) -> Result<ForwardOutput> {
        let w = self.config.window;
        if batch.window != w {
            return Err(Error::Incompatible(format!("batch window {} but model window {w}", batch.window)));
        }
        let want = embedding_input_dim(self.config.grid);
        if batch.features.cols() != want {
            return Err(Error::Incompatible(format!("feature width {} but model expects {want}", batch.features.cols())));
        }
        let inputs = StaInputs {
            features: tape.constant(batch.features.clone()),
            pose144: tape.constant(batch.pose144.clone()),
            omega: tape.constant(batch.omega.clone()),
        };
        let sta = self.sta.forward(tape, store, &inputs)?;
        let head_input = match &self.feature_lstm {
            Some(l) => l.forward(tape, store, sta.z, w)?,
            None => sta.z,
        };
        let (theta_coarse, omega) = self.head.predict(tape, store, head_input)?;
        let (theta_res, theta_pred) = match &self.refiner {
            Some(r) => {
                let res = r.residual(tape, store, head_input, theta_coarse, w)?;
                (Some(res), tape.add(theta_coarse, res)?)
            }
            None => (None, theta_coarse),
        };
        Ok(ForwardOutput {
            sta,
            head_input,
            theta_coarse,
            theta_res,
            theta_pred,
            omega,
        })
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            sta: self.sta.clone(),
            head: self.head.clone(),
            refiner: self.refiner.clone(),
            feature_lstm: self.feature_lstm.clone(),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(
            CHECKPOINT_VERSION,
            json!({ "model": self.config, "parameters": self.store.num_values() }),
        );
        for p in self.store.iter() {
            c.push(Section::from_f64(
                p.name.clone(),
                p.value.shape().to_vec(),
                p.value.data().iter().map(|v| v.as_f64()),
            )?);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            c.meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::CorruptSection {
                    section: "manifest".into(),
                    detail: "missing model configuration".into(),
                })?,
        )?;
        let mut model = Self::new(config, &[0.0; STATE_DIM])?;
        if c.sections.len() != model.store.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} tensors, architecture has {}",
                c.sections.len(),
                model.store.len()
            )));
        }
        for p in model.store.iter_mut() {
            let s = c
                .sections
                .iter()
                .find(|s| s.name == p.name)
                .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks parameter {}", p.name)))?;
            if s.shape != p.value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {} has shape {:?}, checkpoint stores {:?}",
                    p.name,
                    p.value.shape(),
                    s.shape
                )));
            }
            p.value
                .data_mut()
                .iter_mut()
                .zip(&s.data)
                .for_each(|(d, &v)| *d = T::lit(v as f64));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, CHECKPOINT_VERSION)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::SkeletonTemplate;
    use crate::config::AblationFlags;
    use crate::dataio::{generate_synthetic, MotionConfig};
    use crate::providers::{FrameProvider, SyntheticConfig, SyntheticProvider};

    fn tiny() -> ModelConfig {
        ModelConfig {
            window: 4,
            feature_dim: 12,
            uplift_dim: 6,
            attn_dim: 5,
            lstm_layers: 2,
            lstm_hidden: 7,
            head_hidden: 9,
            ..ModelConfig::desk()
        }
    }

    fn inputs(n: usize) -> (Vec<MotionSequence>, SequenceInputs) {
        let tmpl = SkeletonTemplate::standard();
        let seqs = generate_synthetic(3, 1, n, &MotionConfig::default(), &tmpl).unwrap();
        let p = SyntheticProvider::new(SyntheticConfig::default()).unwrap();
        let si = SequenceInputs::new(&p.features(&seqs[0]).unwrap(), &p.inits(&seqs[0]).unwrap()).unwrap();
        (seqs, si)
    }

    #[test]
    fn prediction_is_coarse_plus_residual() {
        let (seqs, si) = inputs(8);
        let mut model = Model::<f64>::new(tiny(), &mean_state(&seqs).unwrap()).unwrap();
        let proj = model.refiner.as_ref().unwrap().proj;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        for id in [proj.weight, proj.bias] {
            model.store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        let batch = si.batch::<f64>(&[0..4, 4..8]).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch).unwrap();
        let (c, r, p) = (
            tape.value(out.theta_coarse),
            tape.value(out.theta_res.unwrap()),
            tape.value(out.theta_pred),
        );
        for i in 0..c.len() {
            assert_eq!(p.data()[i], c.data()[i] + r.data()[i]);
        }
        assert!(r.max_abs() > 0.0);
        let z = tape.value(out.sta.z);
        let (fh, y) = (tape.value(out.sta.embedded.f_h), tape.value(out.sta.y));
        for i in 0..z.len() {
            assert_eq!(z.data()[i], fh.data()[i] + y.data()[i]);
        }
    }

    #[test]
    fn without_lstm_prediction_is_coarse() {
        let (seqs, si) = inputs(4);
        let cfg = ModelConfig {
            flags: AblationFlags {
                no_lstm: true,
                ..Default::default()
            },
            ..tiny()
        };
        let model = Model::<f64>::new(cfg, &mean_state(&seqs).unwrap()).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &si.batch(std::slice::from_ref(&(0..4))).unwrap()).unwrap();
        assert_eq!(out.theta_pred, out.theta_coarse);
        assert!(model.store.iter().all(|p| !p.name.starts_with("refiner")));
    }

    #[test]
    fn ablations_only_touch_their_subnetwork() {
        let base = Model::<f32>::new(tiny(), &[0.0; STATE_DIM]).unwrap();
        let names = |m: &Model<f32>| -> Vec<(String, Vec<usize>)> {
            m.store.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect()
        };
        let full = names(&base);
        let cases: [(AblationFlags, &[&str]); 4] = [
            (AblationFlags { no_lstm: true, ..Default::default() }, &["refiner"]),
            (AblationFlags { no_cam_init: true, ..Default::default() }, &["sta.gamma2", "sta.phi1", "sta.phi2", "sta.phi6"]),
            (AblationFlags { no_pose_init: true, ..Default::default() }, &["sta.gamma1", "sta.phi6"]),
            (AblationFlags { no_body_aware_features: true, ..Default::default() }, &["sta.phi3", "sta.phi4", "sta.phi6"]),
        ];
        for (flags, touched) in cases {
            let m = Model::<f32>::new(ModelConfig { flags, ..tiny() }, &[0.0; STATE_DIM]).unwrap();
            let other = names(&m);
            let untouched = |n: &str| !touched.iter().any(|t| n.starts_with(t));
            let a: Vec<_> = full.iter().filter(|(n, _)| untouched(n)).collect();
            let b: Vec<_> = other.iter().filter(|(n, _)| untouched(n)).collect();
            assert_eq!(a, b, "{}", flags.label());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::<f32>::new(tiny(), &[0.5; STATE_DIM]).unwrap();
        m.save(&path).unwrap();
        let back = Model::<f32>::load(&path).unwrap();
        for (a, b) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(std::fs::read(&path).unwrap(), back.to_container().unwrap().to_bytes().unwrap());

        let mut c = m.to_container().unwrap();
        c.meta["model"]["lstm_hidden"] = json!(8);
        assert!(matches!(Model::<f32>::from_container(&c), Err(Error::Incompatible(_))));
    }

    #[test]
    fn wrong_window_is_rejected() {
        let (seqs, si) = inputs(8);
        let model = Model::<f64>::new(tiny(), &mean_state(&seqs).unwrap()).unwrap();
        let mut tape = Tape::new();
        assert!(model.forward(&mut tape, &si.batch(std::slice::from_ref(&(0..8))).unwrap()).is_err());
    }
}
