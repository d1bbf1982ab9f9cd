use rand::Rng;

use super::array::{Array, Real};
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{shape_err, Result};

/// Affine map applied row-wise (equivalently a 1×1 convolution over frames).
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            weight: store.add_weight(&format!("{name}.weight"), din, dout, rng)?,
            bias: store.add_zeros(&format!("{name}.bias"), &[dout])?,
            din,
            dout,
        })
    }

    /// Zero weights and bias, so the layer initially outputs zeros.
    pub fn zeroed<T: Real>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add_zeros(&format!("{name}.weight"), &[din, dout])?,
            bias: store.add_zeros(&format!("{name}.bias"), &[dout])?,
            din,
            dout,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.din {
            return shape_err(format!(
                "linear expects {} input features, got {}",
                self.din,
                tape.value(x).cols()
            ));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let m = tape.matmul(x, w)?;
        tape.add_bias(m, b)
    }
}

/// One LSTM layer with gate order (input, forget, cell, output).
#[derive(Clone, Copy, Debug)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub hidden: usize,
}

/// Stacked unidirectional LSTM; state starts at zero for every sequence.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
}

impl Lstm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let inp = if l == 0 { din } else { hidden };
            layers.push(LstmLayer {
                w_ih: store.add_weight(&format!("{name}.l{l}.w_ih"), inp, 4 * hidden, rng)?,
                w_hh: store.add_weight(&format!("{name}.l{l}.w_hh"), hidden, 4 * hidden, rng)?,
                // Forget-gate bias starts at one.
                bias: store.add(
                    &format!("{name}.l{l}.bias"),
                    Array::from_fn(&[4 * hidden], |k| if (hidden..2 * hidden).contains(&k) { T::one() } else { T::zero() }),
                )?,
                din: inp,
                hidden,
            });
        }
        Ok(Self { layers })
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    /// Runs every window of `steps` consecutive rows through the stack and returns the
    /// top-layer hidden states in the input row order.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, steps: usize) -> Result<Var> {
        let rows = tape.value(x).rows();
        if steps == 0 || !rows.is_multiple_of(steps) {
            return shape_err(format!("lstm: {rows} rows are not whole sequences of {steps}"));
        }
        let batch = rows / steps;
        // Rows of step t, across the batch.
        let step_rows: Vec<Vec<usize>> = (0..steps).map(|t| (0..batch).map(|b| b * steps + t).collect()).collect();
        // Inverse permutation from time-major back to window-major order.
        let unpermute: Vec<usize> = (0..rows).map(|r| (r % steps) * batch + r / steps).collect();

        let mut input = x;
        for layer in &self.layers {
            if tape.value(input).cols() != layer.din {
                return shape_err(format!("lstm layer expects {} inputs", layer.din));
            }
            let h = layer.hidden;
            let w_ih = tape.param(store, layer.w_ih);
            let w_hh = tape.param(store, layer.w_hh);
            let bias = tape.param(store, layer.bias);
            let projected = tape.matmul(input, w_ih)?;
            let projected = tape.add_bias(projected, bias)?;
            let mut state: Option<(Var, Var)> = None;
            let mut outputs = Vec::with_capacity(steps);
            for rows_t in &step_rows {
                let mut gates = tape.gather_rows(projected, rows_t.clone())?;
                if let Some((h_prev, _)) = state {
                    let rec = tape.matmul(h_prev, w_hh)?;
                    gates = tape.add(gates, rec)?;
                }
                let i_pre = tape.slice_cols(gates, 0, h)?;
                let f_pre = tape.slice_cols(gates, h, 2 * h)?;
                let g_pre = tape.slice_cols(gates, 2 * h, 3 * h)?;
                let o_pre = tape.slice_cols(gates, 3 * h, 4 * h)?;
                let i = tape.sigmoid(i_pre);
                let g = tape.tanh(g_pre);
                let o = tape.sigmoid(o_pre);
                let mut c = tape.mul(i, g)?;
                if let Some((_, c_prev)) = state {
                    let f = tape.sigmoid(f_pre);
                    let keep = tape.mul(f, c_prev)?;
                    c = tape.add(keep, c)?;
                }
                let tc = tape.tanh(c);
                let h_new = tape.mul(o, tc)?;
                outputs.push(h_new);
                state = Some((h_new, c));
            }
            let time_major = tape.concat_rows(&outputs)?;
            input = tape.gather_rows(time_major, unpermute.clone())?;
        }
        Ok(input)
    }
}
