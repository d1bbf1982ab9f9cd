//! Spatio-temporal feature aggregation over a window of frames.
//!
//! Every per-frame tensor on the tape is `[B·W × d]`, windows stored as
//! consecutive blocks of `W` rows. Similarity maps are `[B·W × W]`.

use std::io::Write;

use rand::Rng;

use crate::body_model::{CAM_DIM, POSE6D_DIM};
use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Array, Linear, ParamId, ParamStore, Real, Tape, Var};
use crate::providers::embedding_input_dim;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    NssmFeatures,
    NssmPose,
    NssmCamera,
    AmFeatures,
    AmCamera,
    AmPose,
}

impl MapKind {
    pub fn name(&self) -> &'static str {
        match self {
            MapKind::NssmFeatures => "nssm_h",
            MapKind::NssmPose => "nssm_pose",
            MapKind::NssmCamera => "nssm_cam",
            MapKind::AmFeatures => "am_h",
            MapKind::AmCamera => "am_cam",
            MapKind::AmPose => "am_pose",
        }
    }
}

/// Query/key projections of one attention map.
#[derive(Clone, Copy, Debug)]
pub struct AttentionPair {
    pub query: Linear,
    pub key: Linear,
}

/// `(cos(xᵢ, xⱼ) + 1) / 2` per window, clamped to `[0, 1]`; zero rows have cosine 0 with everything.
pub fn nssm_on_tape<T: Real>(tape: &mut Tape<T>, x: Var, window: usize, min_max: bool) -> Result<Var> {
    let unit = tape.row_normalize(x);
    let cos = tape.block_abt(unit, unit, window)?;
    if min_max {
        tape.block_min_max(cos, window)
    } else {
        let s = tape.affine(cos, T::lit(0.5), T::lit(0.5));
        Ok(tape.clamp(s, T::zero(), T::one()))
    }
}

/// `softmax_rows((Φa x)(Φb x)ᵀ / √d)` per window.
pub fn attention_on_tape<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    pair: &AttentionPair,
    window: usize,
    scale: bool,
) -> Result<Var> {
    let q = pair.query.forward(tape, store, x)?;
    let k = pair.key.forward(tape, store, x)?;
    let mut logits = tape.block_abt(q, k, window)?;
    if scale {
        logits = tape.scale(logits, T::lit(1.0 / (pair.query.dout as f64).sqrt()));
    }
    Ok(tape.softmax_rows(logits))
}

/// NSSM of a single window `[W × D]`.
pub fn nssm(x: &Array<f64>) -> Array<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let s = nssm_on_tape(&mut tape, xv, x.rows(), false).expect("a single window is always whole");
    tape.value(s).clone()
}

/// Attention map of a single window with explicit projection weights.
pub fn attention_map(
    x: &Array<f64>,
    wa: &Array<f64>,
    ba: &Array<f64>,
    wb: &Array<f64>,
    bb: &Array<f64>,
    scale: bool,
) -> Result<Array<f64>> {
    let mut store = ParamStore::new();
    let pair = AttentionPair {
        query: Linear {
            weight: store.add("q.weight", wa.clone())?,
            bias: store.add("q.bias", ba.clone())?,
            din: wa.rows(),
            dout: wa.cols(),
        },
        key: Linear {
            weight: store.add("k.weight", wb.clone())?,
            bias: store.add("k.bias", bb.clone())?,
            din: wb.rows(),
            dout: wb.cols(),
        },
    };
    if wa.shape() != wb.shape() {
        return shape_err(format!("query {:?} vs key {:?}", wa.shape(), wb.shape()));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let a = attention_on_tape(&mut tape, &store, xv, &pair, x.rows(), scale)?;
    Ok(tape.value(a).clone())
}

/// Per-frame inputs of a batch of windows, already on the tape.
#[derive(Clone, Copy, Debug)]
pub struct StaInputs {
    /// `[B·W × Dg]` flattened or pooled feature grids.
    pub features: Var,
    /// `[B·W × 144]` 6D rotations of the pose initialization.
    pub pose144: Var,
    /// `[B·W × 3]` camera initialization.
    pub omega: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    pub f_h: Var,
    pub f_pose: Option<Var>,
    pub f_cam: Option<Var>,
}

/// Values produced by one STA pass.
#[derive(Clone, Debug)]
pub struct StaTrace {
    pub embedded: Embedded,
    pub maps: Vec<(MapKind, Var)>,
    pub fused: Var,
    pub y: Var,
    pub z: Var,
}

/// The STA block: embeddings, similarity/attention maps, fusion and aggregation.
#[derive(Clone, Debug)]
pub struct Sta {
    pub window: usize,
    pub gamma1: Option<Linear>,
    pub gamma2: Option<Linear>,
    pub gamma3: Linear,
    /// Attention over the camera embedding.
    pub phi12: Option<AttentionPair>,
    /// Attention over the feature embedding.
    pub phi34: Option<AttentionPair>,
    pub phi_pose: Option<AttentionPair>,
    pub phi5: Linear,
    pub phi6_weight: ParamId,
    pub phi6_bias: ParamId,
    pub phi7: Linear,
    pub kinds: Vec<MapKind>,
    pub scale_attention: bool,
    pub nssm_min_max: bool,
    pub fused_softmax: bool,
}

fn pair<T: Real>(store: &mut ParamStore<T>, a: &str, b: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Result<AttentionPair> {
    Ok(AttentionPair {
        query: Linear::new(store, a, din, dout, rng)?,
        key: Linear::new(store, b, din, dout, rng)?,
    })
}

impl Sta {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.flags;
        let (fd, ud, ad) = (cfg.feature_dim, cfg.uplift_dim, cfg.attn_dim);
        let gamma1 = (!f.no_pose_init)
            .then(|| Linear::new(store, "sta.gamma1", POSE6D_DIM, ud, rng))
            .transpose()?;
        let gamma2 = (!f.no_cam_init)
            .then(|| Linear::new(store, "sta.gamma2", CAM_DIM, ud, rng))
            .transpose()?;
        let gamma3 = Linear::new(store, "sta.gamma3", embedding_input_dim(cfg.grid), fd, rng)?;
        let phi12 = (!f.no_cam_init)
            .then(|| pair(store, "sta.phi1", "sta.phi2", ud, ad, rng))
            .transpose()?;
        let phi34 = (!f.no_body_aware_features)
            .then(|| pair(store, "sta.phi3", "sta.phi4", fd, ad, rng))
            .transpose()?;
        let phi_pose = f
            .am_on_pose
            .then(|| pair(store, "sta.phi_pose_q", "sta.phi_pose_k", ud, ad, rng))
            .transpose()?;
        let mut kinds = Vec::new();
        if !f.no_body_aware_features {
            kinds.push(MapKind::NssmFeatures);
        }
        if !f.no_pose_init {
            kinds.push(MapKind::NssmPose);
        }
        if !f.no_cam_init {
            kinds.push(MapKind::NssmCamera);
        }
        if !f.no_body_aware_features {
            kinds.push(MapKind::AmFeatures);
        }
        if !f.no_cam_init {
            kinds.push(MapKind::AmCamera);
        }
        if f.am_on_pose {
            kinds.push(MapKind::AmPose);
        }
        if kinds.is_empty() {
            return Err(Error::Config("every similarity and attention map is ablated".into()));
        }
        let phi5 = Linear::new(store, "sta.phi5", fd, ad, rng)?;
        // Φ6 starts as a plain average of the maps, scaled to unit row mass.
        let c = kinds.len();
        let w0 = T::lit(1.0 / (c * cfg.window) as f64);
        let phi6_weight = store.add("sta.phi6.weight", Array::full(&[c, 1], w0))?;
        let phi6_bias = store.add_zeros("sta.phi6.bias", &[1])?;
        let phi7 = Linear::new(store, "sta.phi7", ad, fd, rng)?;
        Ok(Self {
            window: cfg.window,
            gamma1,
            gamma2,
            gamma3,
            phi12,
            phi34,
            phi_pose,
            phi5,
            phi6_weight,
            phi6_bias,
            phi7,
            kinds,
            scale_attention: cfg.scale_attention,
            nssm_min_max: cfg.nssm_min_max,
            fused_softmax: cfg.fused_softmax,
        })
    }

    /// Γ1, Γ2, Γ3: per-frame embeddings.
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, inputs: &StaInputs) -> Result<Embedded> {
        let f_h = self.gamma3.forward(tape, store, inputs.features)?;
        let f_pose = self.gamma1.map(|g| g.forward(tape, store, inputs.pose144)).transpose()?;
        let f_cam = self.gamma2.map(|g| g.forward(tape, store, inputs.omega)).transpose()?;
        Ok(Embedded { f_h, f_pose, f_cam })
    }

    /// The active maps, in `self.kinds` order.
    pub fn similarity_maps<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        e: &Embedded,
    ) -> Result<Vec<(MapKind, Var)>> {
        let w = self.window;
        let missing = |what: &str| Error::Config(format!("{what} embedding is ablated"));
        let mut maps = Vec::with_capacity(self.kinds.len());
        for &kind in &self.kinds {
            let m = match kind {
                MapKind::NssmFeatures => nssm_on_tape(tape, e.f_h, w, self.nssm_min_max)?,
                MapKind::NssmPose => nssm_on_tape(tape, e.f_pose.ok_or_else(|| missing("pose"))?, w, self.nssm_min_max)?,
                MapKind::NssmCamera => nssm_on_tape(tape, e.f_cam.ok_or_else(|| missing("camera"))?, w, self.nssm_min_max)?,
                MapKind::AmFeatures => {
                    attention_on_tape(tape, store, e.f_h, self.phi34.as_ref().unwrap(), w, self.scale_attention)?
                }
                MapKind::AmCamera => {
                    let x = e.f_cam.ok_or_else(|| missing("camera"))?;
                    attention_on_tape(tape, store, x, self.phi12.as_ref().unwrap(), w, self.scale_attention)?
                }
                MapKind::AmPose => {
                    let x = e.f_pose.ok_or_else(|| missing("pose"))?;
                    attention_on_tape(tape, store, x, self.phi_pose.as_ref().unwrap(), w, self.scale_attention)?
                }
            };
            maps.push((kind, m));
        }
        Ok(maps)
    }

    /// `fused = Σ_k w6_k·map_k + b6`, `Y = Φ7(fused · Φ5(f_H))`, `Z = f_H + Y`.
    pub fn fuse_and_aggregate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        maps: &[Var],
        f_h: Var,
    ) -> Result<(Var, Var, Var)> {
        if maps.is_empty() {
            return Err(Error::Config("every similarity and attention map is ablated".into()));
        }
        let w6 = tape.param(store, self.phi6_weight);
        if tape.value(w6).rows() != maps.len() {
            return shape_err(format!("{} maps for a {}-channel fusion", maps.len(), tape.value(w6).rows()));
        }
        let rows = tape.value(maps[0]).rows();
        let w = self.window;
        let mut columns = Vec::with_capacity(maps.len());
        for &m in maps {
            columns.push(tape.reshape(m, vec![rows * w, 1])?);
        }
        let stacked = tape.concat_cols(&columns)?;
        let b6 = tape.param(store, self.phi6_bias);
        let mixed = tape.matmul(stacked, w6)?;
        let mixed = tape.add_bias(mixed, b6)?;
        let mut fused = tape.reshape(mixed, vec![rows, w])?;
        if self.fused_softmax {
            fused = tape.softmax_rows(fused);
        }
        let values = self.phi5.forward(tape, store, f_h)?;
        let agg = tape.block_matmul(fused, values, w)?;
        let y = self.phi7.forward(tape, store, agg)?;
        let z = tape.add(f_h, y)?;
        Ok((fused, y, z))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, inputs: &StaInputs) -> Result<StaTrace> {
        let embedded = self.embed(tape, store, inputs)?;
        let maps = self.similarity_maps(tape, store, &embedded)?;
        let vars: Vec<Var> = maps.iter().map(|(_, v)| *v).collect();
        let (fused, y, z) = self.fuse_and_aggregate(tape, store, &vars, embedded.f_h)?;
        Ok(StaTrace {
            embedded,
            maps,
            fused,
            y,
            z,
        })
    }
}

/// The maps of one window, in 64-bit for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityStack {
    pub maps: Vec<(MapKind, Array<f64>)>,
    pub fused: Array<f64>,
}

fn window_block<T: Real>(a: &Array<T>, window: usize, index: usize) -> Result<Array<f64>> {
    let start = index * window;
    if start + window > a.rows() {
        return shape_err(format!("window {index} out of range"));
    }
    let data = (start..start + window).flat_map(|r| a.row(r).iter().map(|v| v.as_f64())).collect();
    Array::new(vec![window, a.cols()], data)
}

impl SimilarityStack {
    pub fn from_trace<T: Real>(tape: &Tape<T>, trace: &StaTrace, window: usize, index: usize) -> Result<Self> {
        let maps = trace
            .maps
            .iter()
            .map(|(k, v)| Ok((*k, window_block(tape.value(*v), window, index)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            maps,
            fused: window_block(tape.value(trace.fused), window, index)?,
        })
    }

    /// Long-format CSV rows: `window,map,i,j,value`.
    pub fn write_csv(&self, window_index: usize, out: &mut impl Write) -> Result<()> {
        let all = self.maps.iter().map(|(k, a)| (k.name(), a)).chain(std::iter::once(("fused", &self.fused)));
        for (name, a) in all {
            for i in 0..a.rows() {
                for (j, v) in a.row(i).iter().enumerate() {
                    writeln!(out, "{window_index},{name},{i},{j},{v}")?;
                }
            }
        }
        Ok(())
    }
}
