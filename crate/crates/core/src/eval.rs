//! Sequence-level evaluation of a model or of the initialization it refines.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::body_model::{forward_kinematics, skin_vertices, BodyParams, SkeletonTemplate, Vec3, WeakPerspCam};
use crate::dataio::{root_relative, MotionSequence};
use crate::error::{Error, Result};
use crate::metrics::{acc_err, accel_magnitudes, mpjpe, mpvpe, pa_mpjpe};
use crate::model::{Model, SequenceInputs};
use crate::numerics::Real;
use crate::providers::FrameProvider;
use crate::regressor::{infer_sequence, SequencePrediction, WindowScheduler};

/// Environment variable holding the evaluation thread count.
pub const THREADS_ENV: &str = "STA_MOTION_THREADS";

/// Ground truth paired with the provider's per-frame inputs.
#[derive(Clone, Debug)]
pub struct PreparedSequence {
    pub seq: MotionSequence,
    pub inputs: SequenceInputs,
}

pub fn prepare_sequences(seqs: &[MotionSequence], provider: &dyn FrameProvider) -> Result<Vec<PreparedSequence>> {
    seqs.iter()
        .map(|s| {
            Ok(PreparedSequence {
                seq: s.clone(),
                inputs: SequenceInputs::new(&provider.features(s)?, &provider.inits(s)?)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMetrics {
    pub seq_id: String,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpvpe: f64,
    pub acc_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<SequenceMetrics>,
    /// Mean of the per-sequence rows.
    pub mean: SequenceMetrics,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<SequenceMetrics>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::TooShort("no sequences to evaluate".into()));
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&SequenceMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let mean = SequenceMetrics {
            seq_id: "mean".into(),
            mpjpe: avg(|r| r.mpjpe),
            pa_mpjpe: avg(|r| r.pa_mpjpe),
            mpvpe: avg(|r| r.mpvpe),
            acc_err: avg(|r| r.acc_err),
        };
        Ok(Self { rows, mean })
    }

    /// `seq_id,mpjpe,pa_mpjpe,mpvpe,acc_err`, one row per sequence then the mean.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "seq_id,mpjpe,pa_mpjpe,mpvpe,acc_err")?;
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            writeln!(out, "{},{},{},{},{}", r.seq_id, r.mpjpe, r.pa_mpjpe, r.mpvpe, r.acc_err)?;
        }
        Ok(())
    }
}

fn root_relative_joints(params: &[BodyParams], tmpl: &SkeletonTemplate) -> Vec<Vec<Vec3<f64>>> {
    params.iter().map(|p| root_relative(&forward_kinematics(p, tmpl))).collect()
}

fn root_relative_vertices(params: &[BodyParams], tmpl: &SkeletonTemplate) -> Vec<Vec<Vec3<f64>>> {
    params
        .iter()
        .map(|p| {
            let root = forward_kinematics(p, tmpl)[0];
            skin_vertices(p, tmpl)
                .into_iter()
                .map(|v| [v[0] - root[0], v[1] - root[1], v[2] - root[2]])
                .collect()
        })
        .collect()
}

/// All four metrics of `pred` against the sequence's ground truth, root-relative.
pub fn sequence_metrics(pred: &[BodyParams], gt: &MotionSequence, tmpl: &SkeletonTemplate) -> Result<SequenceMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted frames for {} ground-truth frames", pred.len(), gt.len())));
    }
    let (pj, gj) = (root_relative_joints(pred, tmpl), gt.root_relative_joints());
    let (pv, gv) = (root_relative_vertices(pred, tmpl), root_relative_vertices(&gt.params, tmpl));
    Ok(SequenceMetrics {
        seq_id: gt.seq_id.clone(),
        mpjpe: mpjpe(&pj, &gj)?,
        pa_mpjpe: pa_mpjpe(&pj, &gj)?,
        mpvpe: mpvpe(&pv, &gv)?,
        acc_err: acc_err(&pj, &gj)?,
    })
}

/// Thread count from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn run_parallel<R: Send>(threads: Option<usize>, job: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(job))
        }
        None => Ok(job()),
    }
}

/// Windowed inference for every sequence, in input order.
pub fn predict_all<T: Real>(
    model: &Model<T>,
    seqs: &[PreparedSequence],
    stride: usize,
    threads: Option<usize>,
) -> Result<Vec<SequencePrediction>> {
    let sched = WindowScheduler::new(model.config.window, stride)?;
    run_parallel(threads, || {
        seqs.par_iter()
            .map(|s| infer_sequence(model, &s.inputs, &sched))
            .collect::<Result<Vec<_>>>()
    })?
}

/// Metrics of the refined predictions; results do not depend on the thread count.
pub fn evaluate_model<T: Real>(
    model: &Model<T>,
    seqs: &[PreparedSequence],
    stride: usize,
    tmpl: &Arc<SkeletonTemplate>,
    threads: Option<usize>,
) -> Result<EvalReport> {
    let preds = predict_all(model, seqs, stride, threads)?;
    let rows = run_parallel(threads, || {
        seqs.par_iter()
            .zip(&preds)
            .map(|(s, p)| sequence_metrics(&p.params, &s.seq, tmpl))
            .collect::<Result<Vec<_>>>()
    })??;
    EvalReport::from_rows(rows)
}

pub fn init_params(inputs: &SequenceInputs) -> Result<Vec<BodyParams>> {
    inputs.theta_init.iter().map(|p| BodyParams::unpack(p)).collect()
}

/// Metrics of the provider's initialization.
pub fn evaluate_init(seqs: &[PreparedSequence], tmpl: &SkeletonTemplate) -> Result<EvalReport> {
    let rows = seqs
        .iter()
        .map(|s| sequence_metrics(&init_params(&s.inputs)?, &s.seq, tmpl))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}

/// Per interior frame: mean joint acceleration magnitude of ground truth, initialization and refinement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub t: usize,
    pub gt: f64,
    pub init: f64,
    pub refined: f64,
}

pub fn acceleration_curve(
    gt: &MotionSequence,
    init: &[BodyParams],
    refined: &[BodyParams],
    tmpl: &SkeletonTemplate,
) -> Result<Vec<CurveRow>> {
    let g = accel_magnitudes(&gt.root_relative_joints())?;
    let i = accel_magnitudes(&root_relative_joints(init, tmpl))?;
    let r = accel_magnitudes(&root_relative_joints(refined, tmpl))?;
    if g.len() != i.len() || g.len() != r.len() {
        return Err(Error::Shape("curves of different lengths".into()));
    }
    Ok((0..g.len())
        .map(|k| CurveRow {
            t: k + 1,
            gt: g[k],
            init: i[k],
            refined: r[k],
        })
        .collect())
}

pub fn write_curve_csv(rows: &[CurveRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "t,gt,init,refined")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.t, r.gt, r.init, r.refined)?;
    }
    Ok(())
}

/// `frame_index`, the 85 packed parameters (mm) and the 3 camera values per line.
pub fn write_predictions_csv(params: &[BodyParams], cams: &[WeakPerspCam], out: &mut impl Write) -> Result<()> {
    if params.len() != cams.len() {
        return Err(Error::Shape("parameter and camera counts differ".into()));
    }
    let mut header = vec!["frame_index".to_string()];
    header.extend((0..3).map(|i| format!("t{i}")));
    header.extend((0..72).map(|i| format!("pose{i}")));
    header.extend((0..10).map(|i| format!("beta{i}")));
    header.extend(["cam_s", "cam_tx", "cam_ty"].map(String::from));
    writeln!(out, "{}", header.join(","))?;
    for (t, (p, c)) in params.iter().zip(cams).enumerate() {
        let vals: Vec<String> = p.pack().iter().chain(&c.pack()).map(|v| v.to_string()).collect();
        writeln!(out, "{t},{}", vals.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, MotionConfig};

    #[test]
    fn ground_truth_scores_zero_and_aggregate_is_mean() {
        let tmpl = SkeletonTemplate::standard();
        let seqs = generate_synthetic(1, 3, 10, &MotionConfig::default(), &tmpl).unwrap();
        let rows: Vec<_> = seqs.iter().map(|s| sequence_metrics(&s.params, s, &tmpl).unwrap()).collect();
        for r in &rows {
            assert_eq!((r.mpjpe, r.mpvpe, r.acc_err), (0.0, 0.0, 0.0));
            assert!(r.pa_mpjpe < 1e-9);
        }
        let mut shifted = rows.clone();
        for (k, r) in shifted.iter_mut().enumerate() {
            r.mpjpe = k as f64;
        }
        let rep = EvalReport::from_rows(shifted).unwrap();
        assert_eq!(rep.mean.mpjpe, 1.0);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().last().unwrap().starts_with("mean,1,"));
    }

    #[test]
    fn static_sequence_curve_is_zero() {
        let tmpl = SkeletonTemplate::standard();
        let cfg = MotionConfig {
            max_angle: 0.0,
            translation_range: 0.0,
            ..MotionConfig::default()
        };
        let s = &generate_synthetic(0, 1, 8, &cfg, &tmpl).unwrap()[0];
        let rows = acceleration_curve(s, &s.params, &s.params, &tmpl).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.gt == 0.0 && r.init == 0.0 && r.refined == 0.0));
    }
}
