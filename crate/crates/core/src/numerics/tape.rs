//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every op of one forward pass together with its value;
//! [`Tape::backward`] then sweeps the records in reverse. Only the ops this
//! pipeline needs exist, including a few domain ops (kinematics, weak
//! projection, windowed attention products) with hand-written adjoints.

use std::sync::Arc;

use super::array::{softmax_in_place, Array, Real};
use super::params::{ParamId, ParamStore};
use crate::body_model::{self, SkeletonTemplate, NUM_JOINTS, PARAM_DIM};
use crate::error::{shape_err, Result};

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    ScaleCols(Var, Vec<T>),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    RowNormalize(Var),
    BlockABt(Var, Var, usize),
    BlockMatMul(Var, Var, usize),
    BlockMinMax(Var, usize),
    GroupNorms(Var, usize),
    Mean(Var),
    ClampColMin(Var, usize, T),
    Clamp(Var, T, T),
    RootRelative(Var),
    WeakProject(Var, Var),
    Kinematics(Var, Arc<SkeletonTemplate>),
    AxisAngleToMat(Var),
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every recorded value.
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Array<T>> {
        self.grads[v.0].as_ref()
    }
}

fn accumulate<T: Real>(slot: &mut Option<Array<T>>, g: Array<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn same_shape<T: Real>(a: &Array<T>, b: &Array<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, a: Array<T>) -> Var {
        self.push(a, Op::Leaf)
    }

    /// Records a model parameter; its gradient can later be pushed into the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return shape_err(format!("matmul: {:?} x {:?}", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        Ok(self.push(Array::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        if bv.len() != c {
            return shape_err(format!("add_bias: {:?} + {:?}", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o += b);
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, name: &str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, name)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Array::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    /// Multiplies column `j` by the constant `scales[j]`.
    pub fn scale_cols(&mut self, x: Var, scales: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if scales.len() != c {
            return shape_err(format!("scale_cols: {} scales for {c} columns", scales.len()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(&scales).for_each(|(o, &s)| *o *= s);
        }
        Ok(self.push(out, Op::ScaleCols(x, scales)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = super::array::softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return shape_err("concat_cols: no inputs");
        };
        let rows = self.value(*first).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return shape_err("concat_cols: row counts differ");
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Array::new(vec![rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.cols() {
            return shape_err(format!("slice_cols {start}..{end} of {:?}", xv.shape()));
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let value = Array::new(vec![rows, end - start], out)?;
        Ok(self.push(value, Op::SliceCols(x, start)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return shape_err(format!("gather_rows: row {bad} of {}", xv.rows()));
        }
        let c = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(xv.row(i));
        }
        let value = Array::new(vec![idx.len(), c], out)?;
        Ok(self.push(value, Op::GatherRows(x, idx)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return shape_err("concat_rows: no inputs");
        };
        let c = self.value(*first).cols();
        if parts.iter().any(|p| self.value(*p).cols() != c) {
            return shape_err("concat_rows: column counts differ");
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
            rows += self.value(*p).rows();
        }
        let value = Array::new(vec![rows, c], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Each row divided by its Euclidean norm; all-zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if n > T::zero() {
                    row.iter_mut().for_each(|v| *v = *v / n);
                }
            }
        }
        self.push(out, Op::RowNormalize(x))
    }

    fn blocks(&self, a: Var, w: usize, name: &str) -> Result<usize> {
        let rows = self.value(a).rows();
        if w == 0 || !rows.is_multiple_of(w) {
            return shape_err(format!("{name}: {rows} rows are not whole windows of {w}"));
        }
        Ok(rows / w)
    }

    /// Per window of `w` consecutive rows: `A_b · B_bᵀ`, stacked to `[B·w × w]`.
    pub fn block_abt(&mut self, a: Var, b: Var, w: usize) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "block_abt")?;
        let nb = self.blocks(a, w, "block_abt")?;
        let d = self.value(a).cols();
        let mut out = vec![T::zero(); nb * w * w];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for blk in 0..nb {
            let s = blk * w * d;
            T::gemm(w, d, w, &av[s..s + w * d], false, &bv[s..s + w * d], true, &mut out[blk * w * w..(blk + 1) * w * w], false);
        }
        let value = Array::new(vec![nb * w, w], out)?;
        Ok(self.push(value, Op::BlockABt(a, b, w)))
    }

    /// Per window: `A_b · V_b` with `A: [B·w × w]`, `V: [B·w × d]`.
    pub fn block_matmul(&mut self, a: Var, v: Var, w: usize) -> Result<Var> {
        let nb = self.blocks(a, w, "block_matmul")?;
        let (av, vv) = (self.value(a), self.value(v));
        if av.cols() != w || vv.rows() != av.rows() {
            return shape_err(format!("block_matmul: {:?} x {:?} (w={w})", av.shape(), vv.shape()));
        }
        let d = vv.cols();
        let mut out = vec![T::zero(); nb * w * d];
        for blk in 0..nb {
            let sa = blk * w * w;
            let sv = blk * w * d;
            T::gemm(w, w, d, &av.data()[sa..sa + w * w], false, &vv.data()[sv..sv + w * d], false, &mut out[sv..sv + w * d], false);
        }
        let value = Array::new(vec![nb * w, d], out)?;
        Ok(self.push(value, Op::BlockMatMul(a, v, w)))
    }

    /// Per `w×w` block: `(x − min) / (max − min)`; constant blocks map to 1.
    pub fn block_min_max(&mut self, x: Var, w: usize) -> Result<Var> {
        let nb = self.blocks(x, w, "block_min_max")?;
        let mut out = self.value(x).clone();
        if out.cols() != w {
            return shape_err("block_min_max: blocks must be square");
        }
        for blk in out.data_mut().chunks_mut(w * w).take(nb) {
            let (lo, hi) = min_max(blk);
            let span = hi.1 - lo.1;
            for v in blk.iter_mut() {
                *v = if span > T::zero() { (*v - lo.1) / span } else { T::one() };
            }
        }
        Ok(self.push(out, Op::BlockMinMax(x, w)))
    }

    /// Euclidean norms of consecutive column groups of size `g`: `[r × c] → [r × c/g]`.
    pub fn group_norms(&mut self, x: Var, g: usize) -> Result<Var> {
        let xv = self.value(x);
        if g == 0 || !xv.cols().is_multiple_of(g) {
            return shape_err(format!("group_norms: {} columns in groups of {g}", xv.cols()));
        }
        let data = xv
            .data()
            .chunks(g)
            .map(|c| c.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let value = Array::new(vec![xv.rows(), xv.cols() / g], data)?;
        Ok(self.push(value, Op::GroupNorms(x, g)))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.sum() / T::from_usize(xv.len().max(1)).unwrap();
        self.push(Array::scalar(m), Op::Mean(x))
    }

    pub fn clamp_col_min(&mut self, x: Var, col: usize, min: T) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.cols();
        if col >= c {
            return shape_err(format!("clamp_col_min: column {col} of {c}"));
        }
        for row in out.data_mut().chunks_mut(c) {
            row[col] = row[col].max(min);
        }
        Ok(self.push(out, Op::ClampColMin(x, col, min)))
    }

    /// Elementwise clamp to `[lo, hi]`; values already inside pass their gradient through.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(lo).min(hi));
        self.push(out, Op::Clamp(x, lo, hi))
    }

    /// Subtracts the first 3-vector of every row from all of the row's 3-vectors.
    pub fn root_relative(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.cols();
        if !c.is_multiple_of(3) || c == 0 {
            return shape_err("root_relative: columns must be 3-vectors");
        }
        for row in out.data_mut().chunks_mut(c) {
            let root = [row[0], row[1], row[2]];
            for p in row.chunks_mut(3) {
                for a in 0..3 {
                    p[a] -= root[a];
                }
            }
        }
        Ok(self.push(out, Op::RootRelative(x)))
    }

    /// Weak-perspective projection of per-row point sets: cam `[r × 3]`, points `[r × 3K]` → `[r × 2K]`.
    pub fn weak_project(&mut self, cam: Var, points: Var) -> Result<Var> {
        let (cv, pv) = (self.value(cam), self.value(points));
        if cv.cols() != 3 || cv.rows() != pv.rows() || pv.cols() % 3 != 0 {
            return shape_err(format!("weak_project: cam {:?}, points {:?}", cv.shape(), pv.shape()));
        }
        let k = pv.cols() / 3;
        let mut out = Vec::with_capacity(pv.rows() * 2 * k);
        for r in 0..pv.rows() {
            let c = cv.row(r);
            for p in pv.row(r).chunks(3) {
                out.push(c[0] * p[0] + c[1]);
                out.push(c[0] * p[1] + c[2]);
            }
        }
        let value = Array::new(vec![pv.rows(), 2 * k], out)?;
        Ok(self.push(value, Op::WeakProject(cam, points)))
    }

    /// Forward kinematics of packed `[r × 85]` parameters (translation in mm) to `[r × 72]` joints.
    pub fn kinematics(&mut self, params: Var, tmpl: Arc<SkeletonTemplate>) -> Result<Var> {
        let pv = self.value(params);
        if pv.cols() != PARAM_DIM {
            return shape_err(format!("kinematics: {:?}", pv.shape()));
        }
        let mut out = Vec::with_capacity(pv.rows() * 3 * NUM_JOINTS);
        for r in 0..pv.rows() {
            let st = body_model::fk_packed(pv.row(r), &tmpl);
            out.extend(st.joints.iter().flatten());
        }
        let value = Array::new(vec![pv.rows(), 3 * NUM_JOINTS], out)?;
        Ok(self.push(value, Op::Kinematics(params, tmpl)))
    }

    /// Rodrigues on every 3-vector of each row: `[r × 3K]` → `[r × 9K]` (row-major matrices).
    pub fn axis_angle_to_mat(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.cols().is_multiple_of(3) {
            return shape_err("axis_angle_to_mat: columns must be 3-vectors");
        }
        let mut out = Vec::with_capacity(xv.len() * 3);
        for aa in xv.data().chunks(3) {
            let r = body_model::aa_to_rotmat([aa[0], aa[1], aa[2]]);
            out.extend(r.iter().flatten());
        }
        let value = Array::new(vec![xv.rows(), xv.cols() * 3], out)?;
        Ok(self.push(value, Op::AxisAngleToMat(x)))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Adds every parameter leaf's gradient into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let like = |v: &Var, data: Vec<T>| Array::new(val(v).shape().to_vec(), data).expect("grad shape");
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, false);
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
                accumulate(&mut grads[a.0], like(a, ga));
                accumulate(&mut grads[b.0], like(b, gb));
            }
            Op::AddBias(x, b) => {
                let c = g.cols();
                let mut gb = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                accumulate(&mut grads[x.0], g.clone());
                accumulate(&mut grads[b.0], like(b, gb));
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = g.data().iter().zip(val(b).data()).map(|(&x, &y)| x * y).collect();
                let gb = g.data().iter().zip(val(a).data()).map(|(&x, &y)| x * y).collect();
                accumulate(&mut grads[a.0], like(a, ga));
                accumulate(&mut grads[b.0], like(b, gb));
            }
            Op::Affine(x, s) => accumulate(&mut grads[x.0], g.map(|v| v * *s)),
            Op::ScaleCols(x, scales) => {
                let mut gx = g.clone();
                let c = gx.cols();
                for row in gx.data_mut().chunks_mut(c) {
                    row.iter_mut().zip(scales).for_each(|(o, &s)| *o *= s);
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Tanh(x) => {
                let gx = g.data().iter().zip(y.data()).map(|(&gv, &t)| gv * (T::one() - t * t)).collect();
                accumulate(&mut grads[x.0], like(x, gx));
            }
            Op::Sigmoid(x) => {
                let gx = g.data().iter().zip(y.data()).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                accumulate(&mut grads[x.0], like(x, gx));
            }
            Op::SoftmaxRows(x) => {
                let c = y.cols();
                let mut gx = vec![T::zero(); y.len()];
                for ((out, yr), gr) in gx.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                accumulate(&mut grads[x.0], like(x, gx));
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let c = val(p).cols();
                    let mut gp = Vec::with_capacity(val(p).len());
                    for row in g.data().chunks(total) {
                        gp.extend_from_slice(&row[offset..offset + c]);
                    }
                    offset += c;
                    accumulate(&mut grads[p.0], like(p, gp));
                }
            }
            Op::SliceCols(x, start) => {
                let xv = val(x);
                let (c, w) = (xv.cols(), g.cols());
                let mut gx = vec![T::zero(); xv.len()];
                for (out, gr) in gx.chunks_mut(c).zip(g.data().chunks(w.max(1))) {
                    out[*start..*start + w].copy_from_slice(gr);
                }
                accumulate(&mut grads[x.0], like(x, gx));
            }
            Op::GatherRows(x, idx) => {
                let xv = val(x);
                let c = xv.cols();
                let mut gx = vec![T::zero(); xv.len()];
                for (k, &r) in idx.iter().enumerate() {
                    let src = &g.data()[k * c..(k + 1) * c];
                    gx[r * c..(r + 1) * c].iter_mut().zip(src).for_each(|(o, &v)| *o += v);
                }
                accumulate(&mut grads[x.0], like(x, gx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(p).len();
                    accumulate(&mut grads[p.0], like(p, g.data()[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], like(x, g.data().to_vec())),
            Op::RowNormalize(x) => {
                let xv = val(x);
                let c = xv.cols();
                let mut gx = vec![T::zero(); xv.len()];
                for r in 0..xv.rows() {
                    let n = xv.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
                    if n == T::zero() {
                        continue;
                    }
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                accumulate(&mut grads[x.0], like(x, gx));
            }
            Op::BlockABt(a, b, w) => {
                let (av, bv) = (val(a), val(b));
                let d = av.cols();
                let w = *w;
                let nb = av.rows() / w;
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                for blk in 0..nb {
                    let s = blk * w * d;
                    let gs = &g.data()[blk * w * w..(blk + 1) * w * w];
                    T::gemm(w, w, d, gs, false, &bv.data()[s..s + w * d], false, &mut ga[s..s + w * d], false);
                    T::gemm(w, w, d, gs, true, &av.data()[s..s + w * d], false, &mut gb[s..s + w * d], false);
                }
                accumulate(&mut grads[a.0], like(a, ga));
                accumulate(&mut grads[b.0], like(b, gb));
            }
            Op::BlockMatMul(a, v, w) => {
                let (av, vv) = (val(a), val(v));
                let d = vv.cols();
                let w = *w;
                let nb = av.rows() / w;
                let mut ga = vec![T::zero(); av.len()];
                let mut gv = vec![T::zero(); vv.len()];
                for blk in 0..nb {
                    let sa = blk * w * w;
                    let sv = blk * w * d;
                    let gs = &g.data()[sv..sv + w * d];
                    T::gemm(w, d, w, gs, false, &vv.data()[sv..sv + w * d], true, &mut ga[sa..sa + w * w], false);
                    T::gemm(w, w, d, &av.data()[sa..sa + w * w], true, gs, false, &mut gv[sv..sv + w * d], false);
                }
                accumulate(&mut grads[a.0], like(a, ga));
                accumulate(&mut grads[v.0], like(v, gv));
            }
            Op::BlockMinMax(x, w) => {
                let xv = val(x);
                let mut gx = vec![T::zero(); xv.len()];
                let bs = w * w;
                for ((out, xb), (yb, gb)) in gx
                    .chunks_mut(bs)
                    .zip(xv.data().chunks(bs))
                    .zip(y.data().chunks(bs).zip(g.data().chunks(bs)))
                {
                    let (lo, hi) = min_max(xb);
                    let span = hi.1 - lo.1;
                    if span <= T::zero() {
                        continue;
                    }
                    let mut g_lo = T::zero();
                    let mut g_hi = T::zero();
                    for k in 0..bs {
                        out[k] = gb[k] / span;
                        g_lo += gb[k] * (yb[k] - T::one()) / span;
                        g_hi -= gb[k] * yb[k] / span;
                    }
                    out[lo.0] += g_lo;
                    out[hi.0] += g_hi;
                }
                accumulate(&mut grads[x.0], like(x, gx));
            }
            Op::GroupNorms(x, gsz) => {
                let xv = val(x);
                let mut gx = vec![T::zero(); xv.len()];
                for (k, (out, xs)) in gx.chunks_mut(*gsz).zip(xv.data().chunks(*gsz)).enumerate() {
                    let n = y.data()[k];
                    if n > T::zero() {
                        let s = g.data()[k] / n;
                        out.iter_mut().zip(xs).for_each(|(o, &v)| *o = s * v);
                    }
                }
                accumulate(&mut grads[x.0], like(x, gx));
            }
            Op::Mean(x) => {
                let n = val(x).len().max(1);
                let s = g.data()[0] / T::from_usize(n).unwrap();
                accumulate(&mut grads[x.0], Array::full(val(x).shape(), s));
            }
            Op::ClampColMin(x, col, min) => {
                let xv = val(x);
                let c = xv.cols();
                let mut gx = g.clone();
                for (row, xr) in gx.data_mut().chunks_mut(c).zip(xv.data().chunks(c)) {
                    if xr[*col] < *min {
                        row[*col] = T::zero();
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Clamp(x, lo, hi) => {
                let mut gx = g.clone();
                for (gv, &xv) in gx.data_mut().iter_mut().zip(val(x).data()) {
                    if xv < *lo || xv > *hi {
                        *gv = T::zero();
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::RootRelative(x) => {
                let c = g.cols();
                let mut gx = g.clone();
                for row in gx.data_mut().chunks_mut(c) {
                    let mut total = [T::zero(); 3];
                    for p in row.chunks(3) {
                        for a in 0..3 {
                            total[a] += p[a];
                        }
                    }
                    for a in 0..3 {
                        row[a] -= total[a];
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::WeakProject(cam, points) => {
                let (cv, pv) = (val(cam), val(points));
                let mut gc = vec![T::zero(); cv.len()];
                let mut gp = vec![T::zero(); pv.len()];
                let pc = pv.cols();
                for r in 0..pv.rows() {
                    let c = cv.row(r);
                    let gr = g.row(r);
                    let pr = pv.row(r);
                    for k in 0..pc / 3 {
                        let (gu, gv) = (gr[2 * k], gr[2 * k + 1]);
                        gc[3 * r] += gu * pr[3 * k] + gv * pr[3 * k + 1];
                        gc[3 * r + 1] += gu;
                        gc[3 * r + 2] += gv;
                        gp[r * pc + 3 * k] = gu * c[0];
                        gp[r * pc + 3 * k + 1] = gv * c[0];
                    }
                }
                accumulate(&mut grads[cam.0], like(cam, gc));
                accumulate(&mut grads[points.0], like(points, gp));
            }
            Op::Kinematics(params, tmpl) => {
                let pv = val(params);
                let mut gp = vec![T::zero(); pv.len()];
                for r in 0..pv.rows() {
                    let st = body_model::fk_packed(pv.row(r), tmpl);
                    body_model::fk_backward(&st, tmpl, g.row(r), &mut gp[r * PARAM_DIM..(r + 1) * PARAM_DIM]);
                }
                accumulate(&mut grads[params.0], like(params, gp));
            }
            Op::AxisAngleToMat(x) => {
                let xv = val(x);
                let mut gx = vec![T::zero(); xv.len()];
                for (k, aa) in xv.data().chunks(3).enumerate() {
                    let (_, dr) = body_model::aa_to_rotmat_with_grad([aa[0], aa[1], aa[2]]);
                    let gm = &g.data()[9 * k..9 * k + 9];
                    for axis in 0..3 {
                        let mut s = T::zero();
                        for r in 0..3 {
                            for c in 0..3 {
                                s += gm[3 * r + c] * dr[axis][r][c];
                            }
                        }
                        gx[3 * k + axis] = s;
                    }
                }
                accumulate(&mut grads[x.0], like(x, gx));
            }
        }
    }
}

fn min_max<T: Real>(xs: &[T]) -> ((usize, T), (usize, T)) {
    let mut lo = (0, xs[0]);
    let mut hi = (0, xs[0]);
    for (i, &v) in xs.iter().enumerate() {
        if v < lo.1 {
            lo = (i, v);
        }
        if v > hi.1 {
            hi = (i, v);
        }
    }
    (lo, hi)
}

/// Softmax of one row, exposed for hand-written oracles in tests.
pub fn softmax_vec<T: Real>(row: &[T]) -> Vec<T> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Checks d(Σ wᵢ·outᵢ)/dx against central differences for a unary tape function.
    fn check_unary(
        x0: Array<f64>,
        f: impl Fn(&mut Tape<f64>, Var) -> Var,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let y = f(&mut tape, x);
        let weights = Array::from_fn(tape.value(y).shape(), |_| rng.random_range(-1.0..1.0));
        let wv = tape.constant(weights.clone());
        let prod = tape.mul(y, wv).unwrap();
        let loss = tape.mean(prod);
        let grads = tape.backward(loss);
        let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Array::zeros(x0.shape()));
        let eval = |xs: &Array<f64>| {
            let mut t = Tape::new();
            let x = t.constant(xs.clone());
            let y = f(&mut t, x);
            let wv = t.constant(weights.clone());
            let p = t.mul(y, wv).unwrap();
            let l = t.mean(p);
            t.value(l).data()[0]
        };
        for i in 0..x0.len() {
            let h = 1e-6;
            let (mut p, mut m) = (x0.clone(), x0.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(err < tol, "element {i}: fd {fd} analytic {a}");
        }
    }

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
        Array::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_and_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_array(&mut rng, &[4, 6]);
        check_unary(x.clone(), |t, x| t.tanh(x), 1e-6);
        check_unary(x.clone(), |t, x| t.sigmoid(x), 1e-6);
        check_unary(x.clone(), |t, x| t.softmax_rows(x), 1e-6);
        check_unary(x.clone(), |t, x| t.row_normalize(x), 1e-6);
        check_unary(x.clone(), |t, x| t.group_norms(x, 3).unwrap(), 1e-6);
        check_unary(x.clone(), |t, x| t.root_relative(x).unwrap(), 1e-6);
        check_unary(x.clone(), |t, x| t.gather_rows(x, vec![3, 0, 3, 1]).unwrap(), 1e-6);
        check_unary(x.clone(), |t, x| t.slice_cols(x, 2, 5).unwrap(), 1e-6);
        check_unary(x.clone(), |t, x| t.scale_cols(x, vec![1.0, 2.0, -3.0, 0.5, 0.0, 4.0]).unwrap(), 1e-6);
        check_unary(x.clone(), |t, x| t.clamp_col_min(x, 1, 0.0).unwrap(), 1e-6);
        check_unary(x.clone(), |t, x| t.clamp(x, -0.4, 0.3), 1e-6);
        check_unary(x.clone(), |t, x| t.affine(x, 0.5, 0.5), 1e-6);
        check_unary(x.clone(), |t, x| t.reshape(x, vec![8, 3]).unwrap(), 1e-6);
        check_unary(x.clone(), |t, x| t.axis_angle_to_mat(x).unwrap(), 1e-6);
        check_unary(x.clone(), |t, x| {
            let a = t.slice_cols(x, 0, 2).unwrap();
            let b = t.tanh(x);
            let c = t.concat_cols(&[a, b, a]).unwrap();
            t.concat_rows(&[c, c]).unwrap()
        }, 1e-6);
        check_unary(x.clone(), |t, x| {
            let a = t.tanh(x);
            let b = t.sub(a, x).unwrap();
            let c = t.mul(b, x).unwrap();
            t.add(c, a).unwrap()
        }, 1e-6);
    }

    #[test]
    fn block_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_array(&mut rng, &[6, 5]);
        check_unary(x.clone(), |t, x| {
            let y = t.tanh(x);
            t.block_abt(x, y, 3).unwrap()
        }, 1e-6);
        check_unary(x.clone(), |t, x| {
            let a = t.block_abt(x, x, 2).unwrap();
            t.block_matmul(a, x, 2).unwrap()
        }, 1e-6);
        check_unary(x.clone(), |t, x| {
            let a = t.block_abt(x, x, 3).unwrap();
            t.block_min_max(a, 3).unwrap()
        }, 1e-5);
        let mut t = Tape::<f64>::new();
        let v = t.constant(x.clone());
        assert!(t.block_abt(v, v, 4).is_err());
    }

    #[test]
    fn matmul_bias_projection_kinematics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_array(&mut rng, &[5, 4]);
        let b = rand_array(&mut rng, &[4]);
        let x = rand_array(&mut rng, &[3, 5]);
        check_unary(x.clone(), |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let m = t.matmul(x, wv).unwrap();
            t.add_bias(m, bv).unwrap()
        }, 1e-6);
        check_unary(w.clone(), |t, w| {
            let xv = t.constant(x.clone());
            t.matmul(xv, w).unwrap()
        }, 1e-6);
        let cam_pts = rand_array(&mut rng, &[2, 3 + 9]);
        check_unary(cam_pts, |t, v| {
            let c = t.slice_cols(v, 0, 3).unwrap();
            let p = t.slice_cols(v, 3, 12).unwrap();
            t.weak_project(c, p).unwrap()
        }, 1e-6);
        let params = Array::from_fn(&[2, PARAM_DIM], |_| rng.random_range(-0.6..0.6));
        let tmpl = Arc::new(SkeletonTemplate::standard());
        check_unary(params, |t, p| t.kinematics(p, tmpl.clone()).unwrap(), 1e-5);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Array::zeros(&[2, 3]));
        let b = t.constant(Array::zeros(&[2, 3]));
        assert!(t.matmul(a, b).is_err());
        assert!(t.add_bias(a, b).is_err());
        assert!(t.slice_cols(a, 2, 5).is_err());
        assert!(t.gather_rows(a, vec![2]).is_err());
        let c = t.constant(Array::zeros(&[3, 2]));
        assert!(t.add(a, c).is_err());
    }
}
