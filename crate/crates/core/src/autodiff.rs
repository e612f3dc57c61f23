//! A small reverse-mode tape over dense tensors.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological sort and [`Tape::backward`] is a single reverse sweep. The op
//! set covers exactly what the denoiser, the reference encoder, fusion and the
//! losses need.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::conditioning::conv3x3;
use crate::error::{shape_err, Result};
use crate::fusion::{band_filter, BandWeights, FrequencyMask};
use crate::ops::{gelu, gelu_grad, layer_norm_with_stats, softmax_unchecked};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Square(Var),
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Conv3x3 { x: Var, weight: Var, bias: Var },
    Fuse { inputs: Vec<Var>, mask: FrequencyMask, weights: BandWeights },
    WeightedSum(Var, Vec<f64>),
    SumSquares(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<[usize; 2]> {
    t.dims2(op)
}

fn row_vector_len(v: &Tensor, n: usize, op: &'static str) -> Result<()> {
    if v.len() != n || v.ndim() > 2 || (v.ndim() == 2 && v.shape()[0] != 1) {
        return Err(shape_err(op, format!("row vector {:?} against width {n}", v.shape())));
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant leaf; gradients are tracked but go nowhere.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// A leaf bound to parameter `id`.
    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x[m, n] + v[n]` for every row.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let [_, n] = dims2(self.value(x), "add_row")?;
        row_vector_len(self.value(v), n, "add_row")?;
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(&vv) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, v)))
    }

    /// `x[m, n] * v[n]` for every row.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let [_, n] = dims2(self.value(x), "mul_row")?;
        row_vector_len(self.value(v), n, "mul_row")?;
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, s) in row.iter_mut().zip(&vv) {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulRow(x, v)))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddConst(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    /// Layer norm over the trailing axis, no affine part.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (out, inv_std) = layer_norm_with_stats(self.value(x), eps)?;
        Ok(self.push(out, Op::LayerNorm(x, inv_std)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    /// Softmax over each row of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let [_, n] = dims2(self.value(x), "softmax_rows")?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let p = softmax_unchecked(row);
            row.copy_from_slice(&p);
        }
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [m, n] = dims2(self.value(x), "slice_cols")?;
        if start + len > n {
            return Err(shape_err("slice_cols", format!("columns {start}..{} of {n}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new([m, len], data)?;
        Ok(self.push(out, Op::SliceCols(x, start)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [m, n] = dims2(self.value(x), "slice_rows")?;
        if start + len > m {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {m}", start + len)));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new([len, n], data)?;
        Ok(self.push(out, Op::SliceRows(x, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = dims2(self.value(parts[0]), "concat_rows")?[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let [m, k] = dims2(self.value(p), "concat_rows")?;
            if k != n {
                return Err(shape_err("concat_rows", format!("width {k} vs {n}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += m;
        }
        let out = Tensor::new([rows, n], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = dims2(self.value(parts[0]), "concat_cols")?[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let [r, k] = dims2(self.value(p), "concat_cols")?;
            if r != m {
                return Err(shape_err("concat_cols", format!("rows {r} vs {m}")));
            }
            widths.push(k);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &k) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * k..(r + 1) * k]);
            }
        }
        let out = Tensor::new([m, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Same-padded 3x3 convolution, stride 1.
    pub fn conv3x3(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = conv3x3(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::Conv3x3 { x, weight, bias }))
    }

    /// Attaches an already-computed fusion result. Its derivative with
    /// respect to every input is the band filter of the incoming gradient.
    pub fn fused(&mut self, inputs: &[Var], value: Tensor, mask: FrequencyMask, weights: BandWeights) -> Var {
        self.push(value, Op::Fuse { inputs: inputs.to_vec(), mask, weights })
    }

    /// Scalar `sum_i w_i x_i`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(shape_err(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), self.value(x).len()),
            ));
        }
        let s = self.value(x).data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights)))
    }

    /// Scalar `sum_i x_i^2`.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    /// Reverse sweep seeded with ones at `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::ones(self.value(output).shape().to_vec()));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                accumulate(grads, *a, g.matmul(&bv.transpose2()?)?);
                accumulate(grads, *b, av.transpose2()?.matmul(g)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
            }
            Op::AddRow(x, v) => {
                let n = self.value(*v).len();
                let mut gv = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, r) in gv.iter_mut().zip(row) {
                        *acc += r;
                    }
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *v, Tensor::new(self.value(*v).shape().to_vec(), gv)?);
            }
            Op::MulRow(x, v) => {
                let vv = self.value(*v);
                let n = vv.len();
                let xv = self.value(*x);
                let mut gx = g.clone();
                let mut gv = vec![0.0; n];
                for (grow, xrow) in gx.data_mut().chunks_mut(n).zip(xv.data().chunks(n)) {
                    for k in 0..n {
                        gv[k] += grow[k] * xrow[k];
                        grow[k] *= vv.data()[k];
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *v, Tensor::new(vv.shape().to_vec(), gv)?);
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.scale(*c)),
            Op::AddConst(x) => accumulate(grads, *x, g.clone()),
            Op::Square(x) => accumulate(grads, *x, g.zip_map(self.value(*x), |gg, v| 2.0 * v * gg)?),
            Op::LayerNorm(x, inv_std) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut gx = g.clone();
                for ((grow, yrow), &r) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)).zip(inv_std) {
                    let mean_g = grow.iter().sum::<f64>() / d as f64;
                    let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for (gi, yi) in grow.iter_mut().zip(yrow) {
                        *gi = r * (*gi - mean_g - yi * mean_gy);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => accumulate(grads, *x, g.zip_map(self.value(*x), |gg, v| gg * gelu_grad(v))?),
            Op::SoftmaxRows(x) => {
                let p = &node.value;
                let n = p.last_dim();
                let mut gx = g.clone();
                for (grow, prow) in gx.data_mut().chunks_mut(n).zip(p.data().chunks(n)) {
                    let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (gi, pi) in grow.iter_mut().zip(prow) {
                        *gi = pi * (*gi - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose2()?),
            Op::Reshape(x) => {
                accumulate(grads, *x, g.clone().reshape(self.value(*x).shape().to_vec())?)
            }
            Op::SliceCols(x, start) => {
                let [m, n] = dims2(self.value(*x), "slice_cols")?;
                let len = node.value.shape()[1];
                let mut gx = Tensor::zeros([m, n]);
                for r in 0..m {
                    gx.data_mut()[r * n + start..r * n + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                accumulate(grads, *x, gx);
            }
            Op::SliceRows(x, start) => {
                let [m, n] = dims2(self.value(*x), "slice_rows")?;
                let mut gx = Tensor::zeros([m, n]);
                gx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let n = self.value(*p).len();
                    accumulate(grads, *p, Tensor::new(shape, g.data()[offset..offset + n].to_vec())?);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let [m, total] = dims2(g, "concat_cols")?;
                let mut col = 0;
                for p in parts {
                    let k = self.value(*p).shape()[1];
                    let mut data = Vec::with_capacity(m * k);
                    for r in 0..m {
                        data.extend_from_slice(&g.data()[r * total + col..r * total + col + k]);
                    }
                    accumulate(grads, *p, Tensor::new([m, k], data)?);
                    col += k;
                }
            }
            Op::Conv3x3 { x, weight, bias } => {
                let (gx, gw, gb) = conv3x3_backward(self.value(*x), self.value(*weight), g);
                accumulate(grads, *x, gx);
                accumulate(grads, *weight, gw);
                accumulate(grads, *bias, gb);
            }
            Op::Fuse { inputs, mask, weights } => {
                let gi = band_filter(g, mask, *weights)?;
                for v in inputs {
                    accumulate(grads, *v, gi.clone());
                }
            }
            Op::WeightedSum(x, w) => {
                let s = g.data()[0];
                let gx = Tensor::new(self.value(*x).shape().to_vec(), w.iter().map(|wi| s * wi).collect())?;
                accumulate(grads, *x, gx);
            }
            Op::SumSquares(x) => {
                let s = g.data()[0];
                accumulate(grads, *x, self.value(*x).scale(2.0 * s));
            }
        }
        Ok(())
    }

    /// Sums the gradients of every node bound to a parameter into tensors
    /// shaped like `store`.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                for (a, b) in out[id.0].data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        out
    }
}

fn conv3x3_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c_out = w.shape()[0];
    let mut gx = Tensor::zeros(x.shape().to_vec());
    let mut gw = Tensor::zeros(w.shape().to_vec());
    let mut gb = Tensor::zeros([c_out]);
    for o in 0..c_out {
        let gplane = &g.data()[o * h * wd..(o + 1) * h * wd];
        gb.data_mut()[o] = gplane.iter().sum();
        for c in 0..c_in {
            for di in 0..3 {
                for dj in 0..3 {
                    let widx = ((o * c_in + c) * 3 + di) * 3 + dj;
                    let wv = w.data()[widx];
                    let mut acc = 0.0;
                    for i in 0..h {
                        let Some(p) = (i + di).checked_sub(1).filter(|&p| p < h) else { continue };
                        for j in 0..wd {
                            let Some(q) = (j + dj).checked_sub(1).filter(|&q| q < wd) else { continue };
                            let gv = gplane[i * wd + j];
                            acc += gv * x.data()[(c * h + p) * wd + q];
                            gx.data_mut()[(c * h + p) * wd + q] += gv * wv;
                        }
                    }
                    gw.data_mut()[widx] = acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::SeededRng;

    /// Builds `f(theta)` on a fresh tape for a fixed op pipeline and returns
    /// its value and flat gradient.
    fn eval(theta: &[f64], build: &dyn Fn(&mut Tape, Var) -> Var, shape: &[usize]) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let id = store.push("theta", Tensor::new(shape.to_vec(), theta.to_vec()).unwrap());
        let x = tape.param(id, store.get(id));
        let out = build(&mut tape, x);
        let grads = tape.backward(out).unwrap();
        let g = tape.param_grads(&grads, &store);
        (tape.value(out).data()[0], g[0].data().to_vec())
    }

    fn check(build: &dyn Fn(&mut Tape, Var) -> Var, shape: &[usize], seed: u64) {
        let mut rng = SeededRng::new(seed);
        let n: usize = shape.iter().product();
        let theta: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let report = grad_check(
            |p| eval(p, build, shape).0,
            |p| eval(p, build, shape).1,
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "max rel error {}", report.max_rel_error);
    }

    fn probe(tape: &mut Tape, v: Var, seed: u64) -> Var {
        let mut rng = SeededRng::new(seed);
        let n = tape.value(v).len();
        let w: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        tape.weighted_sum(v, w).unwrap()
    }

    #[test]
    fn matmul_layer_norm_softmax_chain() {
        let build = |t: &mut Tape, x: Var| {
            let mut rng = SeededRng::new(99);
            let w = t.input(rng.normal_tensor(&[4, 5]));
            let y = t.matmul(x, w).unwrap();
            let y = t.layer_norm(y, 1e-6).unwrap();
            let y = t.softmax_rows(y).unwrap();
            let y = t.gelu(y);
            probe(t, y, 5)
        };
        check(&build, &[3, 4], 1);
    }

    #[test]
    fn row_broadcast_slicing_and_concat() {
        let build = |t: &mut Tape, x: Var| {
            let a = t.slice_cols(x, 0, 2).unwrap();
            let b = t.slice_cols(x, 2, 3).unwrap();
            let v = t.slice_rows(x, 0, 1).unwrap();
            let v2 = t.slice_cols(v, 0, 2).unwrap();
            let am = t.mul_row(a, v2).unwrap();
            let bt = t.transpose(b).unwrap();
            let bt = t.reshape(bt, &[3, 4]).unwrap();
            let c = t.concat_cols(&[am, b]).unwrap();
            let c = t.add_row(c, v).unwrap();
            let r = t.concat_rows(&[c, x]).unwrap();
            let s = t.square(r);
            let s = t.add_const(s, 0.5);
            let p = probe(t, s, 3);
            let q = t.sum_squares(bt);
            let q = t.scale(q, 0.3);
            let pq = t.add(p, q).unwrap();
            let z = t.sub(pq, q).unwrap();
            t.add(z, q).unwrap()
        };
        check(&build, &[4, 5], 2);
    }

    #[test]
    fn convolution_gradients() {
        let build = |t: &mut Tape, w: Var| {
            let mut rng = SeededRng::new(17);
            let x = t.input(rng.normal_tensor(&[2, 4, 5]));
            let b = t.input(Tensor::vector(alloc::vec![0.1, -0.2, 0.3]));
            let y = t.conv3x3(x, w, b).unwrap();
            probe(t, y, 8)
        };
        check(&build, &[3, 2, 3, 3], 3);
        let build_x = |t: &mut Tape, x: Var| {
            let mut rng = SeededRng::new(18);
            let w = t.input(rng.normal_tensor(&[2, 1, 3, 3]));
            let b = t.input(Tensor::vector(alloc::vec![0.5, 0.0]));
            let y = t.conv3x3(x, w, b).unwrap();
            let y = t.mul(y, y).unwrap();
            probe(t, y, 4)
        };
        check(&build_x, &[1, 3, 3], 4);
    }
}
