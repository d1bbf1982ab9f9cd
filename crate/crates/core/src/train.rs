//! End-to-end optimization of the final prediction with plateau learning-rate decay.

use std::io::Write;
use std::ops::Range;
use std::sync::Arc;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::body_model::SkeletonTemplate;
use crate::config::TrainConfig;
use crate::dataio::{sample_windows, WindowMode};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, PreparedSequence};
use crate::losses::{batch_loss, LossTargets};
use crate::model::{BatchInputs, Model};
use crate::numerics::{Adam, AdamConfig, PlateauScheduler, Tape};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub l_smpl: f64,
    pub l_3d: f64,
    pub l_2d: f64,
    pub l_final: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_mpjpe: Option<f64>,
    /// Learning rate for the next epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept, when validation data exists.
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    /// `step,l_smpl,l_3d,l_2d,l_final,lr`.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "step,l_smpl,l_3d,l_2d,l_final,lr")?;
        for s in &self.steps {
            writeln!(out, "{},{},{},{},{},{}", s.step, s.l_smpl, s.l_3d, s.l_2d, s.l_final, s.lr)?;
        }
        Ok(())
    }
}

/// Splits `n` sequence indices into `(train, validation)` with a seeded shuffle.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let n_val = ((n as f64) * fraction).round() as usize;
    if n_val == 0 {
        return (idx, Vec::new());
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f7a11));
    let val = idx.split_off(n - n_val);
    idx.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (idx, val)
}

/// Runs the configured schedule. With validation data the learning rate decays on
/// stalled validation MPJPE and the best epoch's parameters are restored at the end.
pub fn train(
    model: &mut Model<f32>,
    train_set: &[PreparedSequence],
    val_set: &[PreparedSequence],
    cfg: &TrainConfig,
    tmpl: &Arc<SkeletonTemplate>,
    val_stride: usize,
) -> Result<TrainReport> {
    cfg.validate()?;
    let w = model.config.window;
    let mut windows: Vec<(usize, Range<usize>)> = Vec::new();
    for (i, s) in train_set.iter().enumerate() {
        for r in sample_windows(s.seq.len(), w, WindowMode::Train)? {
            windows.push((i, r));
        }
    }
    if windows.is_empty() {
        return Err(Error::TooShort("no training windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        &model.store,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut sched = PlateauScheduler::new(cfg.lr_decay_factor, cfg.patience);
    let mut report = TrainReport::default();
    let mut best = None;
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        windows.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in windows.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let inputs: Vec<_> = chunk.iter().map(|(i, r)| (&train_set[*i].inputs, r.clone())).collect();
            let targets: Vec<_> = chunk.iter().map(|(i, r)| (&train_set[*i].seq, r.clone())).collect();
            let batch = BatchInputs::<f32>::stack(&inputs)?;
            let targets = LossTargets::<f32>::stack(&targets)?;
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch)?;
            let terms = batch_loss(&mut tape, out.theta_pred, out.omega, &targets, tmpl, &cfg.loss)?;
            let (c, total) = terms.values(&tape);
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at step {step} (smpl {}, 3d {}, 2d {})",
                    c.smpl, c.l3d, c.l2d
                )));
            }
            let grads = tape.backward(terms.total);
            model.store.zero_grads();
            tape.accumulate_param_grads(&grads, &mut model.store);
            adam.step(&mut model.store)
                .map_err(|e| Error::Numerical(format!("step {step}: {e}")))?;
            report.steps.push(StepLog {
                step,
                l_smpl: c.smpl,
                l_3d: c.l3d,
                l_2d: c.l2d,
                l_final: total,
                lr: adam.learning_rate(),
            });
            debug!("step {step}: loss {total:.4}");
            loss_sum += total;
            batches += 1;
            step += 1;
        }
        let val_mpjpe = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_model(model, val_set, val_stride, tmpl, Some(1))?.mean.mpjpe)
        };
        if let Some(m) = val_mpjpe {
            let (lr, improved) = sched.observe(m, adam.learning_rate());
            adam.set_learning_rate(lr);
            if improved {
                best = Some((epoch, model.store.clone()));
            }
        }
        let mean_loss = loss_sum / batches.max(1) as f64;
        info!("epoch {epoch}: mean loss {mean_loss:.4}, val mpjpe {val_mpjpe:?}, lr {}", adam.learning_rate());
        report.epochs.push(EpochLog {
            epoch,
            mean_loss,
            val_mpjpe,
            lr: adam.learning_rate(),
        });
    }
    if let Some((epoch, store)) = best {
        model.store.copy_values_from(&store)?;
        report.best_epoch = Some(epoch);
    }
    Ok(report)
}
