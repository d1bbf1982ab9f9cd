//! Coarse per-frame regression, LSTM residual refinement and windowed inference.

use rand::Rng;

use crate::body_model::{BodyParams, WeakPerspCam, CAM_DIM, PARAM_DIM};
use crate::config::HeadActivation;
use crate::error::{Error, Result};
use crate::model::{Model, SequenceInputs, TRANSLATION_SCALE};
use crate::numerics::{Array, Linear, Lstm, ParamId, ParamStore, Real, Tape, Var};

/// Width of the regressed state `[Θ | ω]`.
pub const STATE_DIM: usize = PARAM_DIM + CAM_DIM;
/// Lower bound on the predicted camera scale.
pub const MIN_CAM_SCALE: f64 = 0.01;

/// Iterative error-feedback regressor `g`: starts from mean parameters and
/// applies `iterations` additive corrections conditioned on `[Z | Θ | ω]`.
#[derive(Clone, Debug)]
pub struct CoarseHead {
    pub fc1: Linear,
    pub fc2: Linear,
    /// Frozen `[1 × 88]` starting state.
    pub mean_params: ParamId,
    pub iterations: usize,
    pub activation: HeadActivation,
}

impl CoarseHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        feature_dim: usize,
        hidden: usize,
        iterations: usize,
        activation: HeadActivation,
        mean_state: &[f64; STATE_DIM],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fc1 = Linear::new(store, "head.fc1", feature_dim + STATE_DIM, hidden, rng)?;
        let fc2 = Linear::new(store, "head.fc2", hidden, STATE_DIM, rng)?;
        // Small output layer so the first corrections stay near the mean.
        store.get_mut(fc2.weight).value.data_mut().iter_mut().for_each(|w| *w *= T::lit(0.01));
        let mean = Array::new(vec![1, STATE_DIM], mean_state.iter().map(|&v| T::lit(v)).collect())?;
        let mean_params = store.add_frozen("head.mean_params", mean)?;
        Ok(Self {
            fc1,
            fc2,
            mean_params,
            iterations,
            activation,
        })
    }

    /// Returns `(Θ^coarse [rows × 85], ω [rows × 3])` in network units.
    pub fn predict<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<(Var, Var)> {
        tape.value(z).ensure_finite("aggregated features")?;
        let rows = tape.value(z).rows();
        let zeros = tape.constant(Array::zeros(&[rows, STATE_DIM]));
        let mean = tape.param(store, self.mean_params);
        let mut state = tape.add_bias(zeros, mean)?;
        for _ in 0..self.iterations {
            let inp = tape.concat_cols(&[z, state])?;
            let mut h = self.fc1.forward(tape, store, inp)?;
            if self.activation == HeadActivation::Tanh {
                h = tape.tanh(h);
            }
            let delta = self.fc2.forward(tape, store, h)?;
            state = tape.add(state, delta)?;
        }
        let state = tape.clamp_col_min(state, PARAM_DIM, T::lit(MIN_CAM_SCALE))?;
        let theta = tape.slice_cols(state, 0, PARAM_DIM)?;
        let omega = tape.slice_cols(state, PARAM_DIM, STATE_DIM)?;
        Ok((theta, omega))
    }
}

/// LSTM over `[Z_i | Θ^coarse_i]` followed by a zero-initialized projection to `Θ^res`.
#[derive(Clone, Debug)]
pub struct RefinerLstm {
    pub lstm: Lstm,
    pub proj: Linear,
}

impl RefinerLstm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        feature_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            lstm: Lstm::new(store, "refiner.lstm", feature_dim + PARAM_DIM, hidden, layers, rng)?,
            proj: Linear::zeroed(store, "refiner.proj", hidden, PARAM_DIM)?,
        })
    }

    /// `Θ^res` for every frame; windows are consecutive blocks of `window` rows.
    pub fn residual<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: Var,
        theta_coarse: Var,
        window: usize,
    ) -> Result<Var> {
        if window == 0 || tape.value(z).rows() == 0 {
            return Err(Error::EmptyWindow);
        }
        let inp = tape.concat_cols(&[z, theta_coarse])?;
        let h = self.lstm.forward(tape, store, inp, window)?;
        self.proj.forward(tape, store, h)
    }
}

/// `Z' = Z + proj(LSTM(Z))`, used when the LSTM runs in feature space.
#[derive(Clone, Debug)]
pub struct FeatureLstm {
    pub lstm: Lstm,
    pub proj: Linear,
}

impl FeatureLstm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        feature_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            lstm: Lstm::new(store, "refiner.lstm", feature_dim, hidden, layers, rng)?,
            proj: Linear::zeroed(store, "refiner.feature_proj", hidden, feature_dim)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var, window: usize) -> Result<Var> {
        if window == 0 || tape.value(z).rows() == 0 {
            return Err(Error::EmptyWindow);
        }
        let h = self.lstm.forward(tape, store, z, window)?;
        let d = self.proj.forward(tape, store, h)?;
        tape.add(z, d)
    }
}

/// Window placement for sequence-level inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowScheduler {
    pub window: usize,
    pub stride: usize,
}

impl WindowScheduler {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 || stride > window {
            return Err(Error::Config(format!("need 1 ≤ stride ≤ window, got stride {stride}, window {window}")));
        }
        Ok(Self { window, stride })
    }

    /// Starts `0, S, 2S, …` while the window fits, plus a tail-aligned window if
    /// frames remain uncovered.
    pub fn starts(&self, n: usize) -> Result<Vec<usize>> {
        if n < self.window {
            return Err(Error::TooShort(format!("{n} frames, window {}", self.window)));
        }
        let mut starts: Vec<usize> = (0..).map(|k| k * self.stride).take_while(|s| s + self.window <= n).collect();
        let last = *starts.last().expect("at least one window fits");
        if last + self.window < n {
            starts.push(n - self.window);
        }
        Ok(starts)
    }

    /// For every frame, the indices of the windows covering it.
    pub fn coverage(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        let mut cover = vec![Vec::new(); n];
        for (k, s) in self.starts(n)?.into_iter().enumerate() {
            for c in &mut cover[s..s + self.window] {
                c.push(k);
            }
        }
        Ok(cover)
    }
}

/// Arithmetic mean of overlapping window outputs. `outputs[k]` holds one row per
/// frame of window `k`, which starts at `starts[k]`.
pub fn average_windows<const D: usize>(n: usize, starts: &[usize], outputs: &[Vec<[f64; D]>]) -> Result<Vec<[f64; D]>> {
    if starts.len() != outputs.len() {
        return Err(Error::Shape(format!("{} starts for {} windows", starts.len(), outputs.len())));
    }
    let mut sum = vec![[0.0; D]; n];
    let mut count = vec![0usize; n];
    for (&s, out) in starts.iter().zip(outputs) {
        if s + out.len() > n {
            return Err(Error::Shape(format!("window at {s} runs past frame {n}")));
        }
        for (i, row) in out.iter().enumerate() {
            sum[s + i].iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            count[s + i] += 1;
        }
    }
    if let Some(f) = count.iter().position(|&c| c == 0) {
        return Err(Error::Shape(format!("frame {f} is not covered by any window")));
    }
    for (row, &c) in sum.iter_mut().zip(&count) {
        if c > 1 {
            row.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    Ok(sum)
}

/// Per-frame output of [`infer_sequence`].
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePrediction {
    pub params: Vec<BodyParams>,
    pub cameras: Vec<WeakPerspCam>,
    pub window_starts: Vec<usize>,
}

/// Rows of a `[rows × 85]` network-space array as millimeter-space packed parameters.
pub fn network_rows_to_mm<T: Real>(a: &Array<T>) -> Vec<[f64; PARAM_DIM]> {
    (0..a.rows())
        .map(|r| {
            let mut out = [0.0; PARAM_DIM];
            for (c, (o, v)) in out.iter_mut().zip(a.row(r)).enumerate() {
                *o = v.as_f64() * if c < 3 { TRANSLATION_SCALE } else { 1.0 };
            }
            out
        })
        .collect()
}

/// Runs the model over every scheduled window and averages overlapping frames.
pub fn infer_sequence<T: Real>(model: &Model<T>, inputs: &SequenceInputs, sched: &WindowScheduler) -> Result<SequencePrediction> {
    if sched.window != model.config.window {
        return Err(Error::Incompatible(format!(
            "scheduler window {} but model window {}",
            sched.window, model.config.window
        )));
    }
    let n = inputs.len();
    let starts = sched.starts(n)?;
    let ranges: Vec<_> = starts.iter().map(|&s| s..s + sched.window).collect();
    let batch = inputs.batch::<T>(&ranges)?;
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch)?;
    let theta = network_rows_to_mm(tape.value(out.theta_pred));
    let omega_a = tape.value(out.omega);
    let omega: Vec<[f64; CAM_DIM]> = (0..omega_a.rows())
        .map(|r| [0, 1, 2].map(|c| omega_a.at(r, c).as_f64()))
        .collect();
    let w = sched.window;
    let theta_w: Vec<Vec<_>> = theta.chunks(w).map(|c| c.to_vec()).collect();
    let omega_w: Vec<Vec<_>> = omega.chunks(w).map(|c| c.to_vec()).collect();
    let theta_avg = average_windows(n, &starts, &theta_w)?;
    let omega_avg = average_windows(n, &starts, &omega_w)?;
    let params = theta_avg
        .iter()
        .map(|p| {
            let bp = BodyParams::unpack(p)?;
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("non-finite prediction".into()));
            }
            Ok(bp)
        })
        .collect::<Result<_>>()?;
    let cameras = omega_avg
        .iter()
        .map(|c| WeakPerspCam::from_slice(c).map_err(|e| Error::Numerical(e.to_string())))
        .collect::<Result<_>>()?;
    Ok(SequencePrediction {
        params,
        cameras,
        window_starts: starts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng) -> [f64; STATE_DIM] {
        let mut s = [0.0; STATE_DIM];
        s.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        s[PARAM_DIM] = 1.0;
        s
    }

    #[test]
    fn zero_corrections_return_mean_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mean = random_state(&mut rng);
        let mut store = ParamStore::<f64>::new();
        let head = CoarseHead::new(&mut store, 10, 7, 3, HeadActivation::Tanh, &mean, &mut rng).unwrap();
        for id in [head.fc2.weight, head.fc2.bias] {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let z = tape.constant(Array::from_fn(&[5, 10], |_| rng.random_range(-1.0..1.0)));
        let (theta, omega) = head.predict(&mut tape, &store, z).unwrap();
        for r in 0..5 {
            assert_eq!(tape.value(theta).row(r), &mean[..PARAM_DIM]);
            assert_eq!(tape.value(omega).row(r), &mean[PARAM_DIM..]);
        }
    }

    #[test]
    fn head_is_per_frame_and_matches_unrolled_iterations() {
        for act in [HeadActivation::Tanh, HeadActivation::Identity] {
            check_unrolled_head(act);
        }
    }

    fn check_unrolled_head(act: HeadActivation) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mean = random_state(&mut rng);
        let mut store = ParamStore::<f64>::new();
        let head = CoarseHead::new(&mut store, 6, 5, 3, act, &mean, &mut rng).unwrap();
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        let z0 = Array::from_fn(&[4, 6], |_| rng.random_range(-1.0..1.0));
        let run = |z: &Array<f64>, head: &CoarseHead| {
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let (t, o) = head.predict(&mut tape, &store, zv).unwrap();
            (tape.value(t).clone(), tape.value(o).clone())
        };
        let (t3, _) = run(&z0, &head);
        let one = CoarseHead { iterations: 1, ..head.clone() };
        let (t1, _) = run(&z0, &one);
        assert_ne!(t1, t3);

        // Manual unrolling of the three corrections.
        let lin = |x: &[f64], l: &Linear| -> Vec<f64> {
            let w = &store.get(l.weight).value;
            let b = &store.get(l.bias).value;
            (0..l.dout).map(|k| b.data()[k] + x.iter().enumerate().map(|(j, v)| v * w.at(j, k)).sum::<f64>()).collect()
        };
        for r in 0..4 {
            let mut s = mean.to_vec();
            for _ in 0..3 {
                let inp: Vec<f64> = z0.row(r).iter().chain(&s).copied().collect();
                let mut h = lin(&inp, &head.fc1);
                if act == HeadActivation::Tanh {
                    h.iter_mut().for_each(|v| *v = v.tanh());
                }
                let d = lin(&h, &head.fc2);
                s.iter_mut().zip(d).for_each(|(a, b)| *a += b);
            }
            for (a, b) in t3.row(r).iter().zip(&s) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        let mut z1 = z0.clone();
        z1.row_mut(2).iter_mut().for_each(|v| *v += 1.0);
        let (t3b, _) = run(&z1, &head);
        for r in [0, 1, 3] {
            assert_eq!(t3.row(r), t3b.row(r));
        }
        assert_ne!(t3.row(2), t3b.row(2));
    }

    #[test]
    fn non_finite_features_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let head = CoarseHead::new(&mut store, 3, 4, 3, HeadActivation::Tanh, &[0.0; STATE_DIM], &mut rng).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Array::new(vec![1, 3], vec![0.0, f64::NAN, 1.0]).unwrap());
        assert!(head.predict(&mut tape, &store, z).is_err());
    }

    #[test]
    fn zero_projection_leaves_coarse_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let refiner = RefinerLstm::new(&mut store, 6, 5, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Array::from_fn(&[8, 6], |_| rng.random_range(-1.0..1.0)));
        let coarse = tape.constant(Array::from_fn(&[8, PARAM_DIM], |_| rng.random_range(-1.0..1.0)));
        let res = refiner.residual(&mut tape, &store, z, coarse, 4).unwrap();
        let pred = tape.add(coarse, res).unwrap();
        assert_eq!(tape.value(pred), tape.value(coarse));
    }

    #[test]
    fn single_frame_window_is_one_cell_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let refiner = RefinerLstm::new(&mut store, 4, 3, 1, &mut rng).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let z = Array::from_fn(&[1, 4], |_| rng.random_range(-1.0..1.0));
        let coarse = Array::from_fn(&[1, PARAM_DIM], |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let (zv, cv) = (tape.constant(z.clone()), tape.constant(coarse.clone()));
        let res = refiner.residual(&mut tape, &store, zv, cv, 1).unwrap();
        let got = tape.value(res).clone();

        // Hand-stepped cell from zero state: c = i·g, h = o·tanh(c).
        let layer = &refiner.lstm.layers[0];
        let x: Vec<f64> = z.row(0).iter().chain(coarse.row(0)).copied().collect();
        let wi = &store.get(layer.w_ih).value;
        let b = &store.get(layer.bias).value;
        let pre: Vec<f64> = (0..12).map(|k| b.data()[k] + x.iter().enumerate().map(|(j, v)| v * wi.at(j, k)).sum::<f64>()).collect();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let h: Vec<f64> = (0..3).map(|u| sig(pre[9 + u]) * (sig(pre[u]) * pre[6 + u].tanh()).tanh()).collect();
        let pw = &store.get(refiner.proj.weight).value;
        let pb = &store.get(refiner.proj.bias).value;
        for k in 0..PARAM_DIM {
            let want = pb.data()[k] + (0..3).map(|u| h[u] * pw.at(u, k)).sum::<f64>();
            assert!((got.at(0, k) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_window_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let refiner = RefinerLstm::new(&mut store, 2, 3, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Array::zeros(&[0, 2]));
        let c = tape.constant(Array::zeros(&[0, PARAM_DIM]));
        assert!(matches!(refiner.residual(&mut tape, &store, z, c, 16), Err(Error::EmptyWindow)));
    }

    fn brute_force_coverage(n: usize, starts: &[usize], w: usize) -> Vec<Vec<usize>> {
        (0..n).map(|f| starts.iter().enumerate().filter(|(_, &s)| s <= f && f < s + w).map(|(k, _)| k).collect()).collect()
    }

    #[test]
    fn scheduler_examples() {
        let s = WindowScheduler::new(16, 14).unwrap();
        assert_eq!(s.starts(16).unwrap(), vec![0]);
        assert_eq!(s.starts(30).unwrap(), vec![0, 14]);
        assert_eq!(s.starts(33).unwrap(), vec![0, 14, 17]);
        assert_eq!(s.coverage(33).unwrap(), brute_force_coverage(33, &[0, 14, 17], 16));
        assert!(matches!(s.starts(15), Err(Error::TooShort(_))));
        assert!(WindowScheduler::new(16, 17).is_err());
        assert!(WindowScheduler::new(16, 0).is_err());
    }

    #[test]
    fn averaging_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let starts = [0, 14];
        let outs: Vec<Vec<[f64; 2]>> = (0..2)
            .map(|_| (0..16).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect())
            .collect();
        let avg = average_windows(30, &starts, &outs).unwrap();
        for f in 0..30 {
            let want = match f {
                0..14 => outs[0][f],
                14..16 => [(outs[0][f][0] + outs[1][f - 14][0]) / 2.0, (outs[0][f][1] + outs[1][f - 14][1]) / 2.0],
                _ => outs[1][f - 14],
            };
            assert_eq!(avg[f], want);
        }
        // No overlap: plain concatenation.
        let avg = average_windows(32, &[0, 16], &outs).unwrap();
        assert_eq!(&avg[..16], &outs[0][..]);
        assert_eq!(&avg[16..], &outs[1][..]);
    }
}
