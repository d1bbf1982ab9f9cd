use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Entries probed per parameter tensor; smaller tensors are probed fully.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_param: usize::MAX,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

fn eval_loss<F>(store: &ParamStore<f64>, loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    Ok(tape.value(l).data()[0])
}

/// Reverse-mode gradients of every parameter, in store order.
pub fn analytic_gradients<F>(store: &mut ParamStore<f64>, loss: &F) -> Result<Vec<Array<f64>>>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    let grads = tape.backward(l);
    tape.accumulate_param_grads(&grads, store);
    Ok(store.iter().map(|p| p.grad.clone()).collect())
}

/// Compares `analytic` against central finite differences of `loss`.
///
/// Relative error is `|a − n| / max(|a|, |n|, floor)` with `floor = 1e-6·max(1, |loss|)`.
pub fn compare_with_finite_differences<F>(
    store: &mut ParamStore<f64>,
    loss: &F,
    analytic: &[Array<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let base = eval_loss(store, loss)?;
    let floor = 1e-6 * base.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let n = analytic[pi].len();
        let idx: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.samples_per_param).into_vec();
            v.sort_unstable();
            v
        };
        for i in idx {
            let orig = store.by_name(name).unwrap().value.data()[i];
            store.by_name_mut(name).unwrap().value.data_mut()[i] = orig + opts.step;
            let plus = eval_loss(store, loss)?;
            store.by_name_mut(name).unwrap().value.data_mut()[i] = orig - opts.step;
            let minus = eval_loss(store, loss)?;
            store.by_name_mut(name).unwrap().value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[pi].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.entries_checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Reverse-mode versus central finite differences for every parameter of a
/// scalar loss evaluated in 64-bit precision.
pub fn grad_check<F>(store: &mut ParamStore<f64>, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &loss)?;
    compare_with_finite_differences(store, &loss, &analytic, opts)
}
