use super::gemm::gemm;
use super::ops::{self, accumulate, broadcast_shape};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Square(Var),
    Sigmoid(Var),
    Relu(Var),
    /// Caller-defined elementwise map; holds the derivative at each input.
    Elementwise(Var, Vec<f64>),
    Softmax(Var),
    MatMul(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    MeanAxis(Var, usize),
    Mse(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        rstd: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run recording of tensor operations.
///
/// A tape is built fresh for every forward pass. `backward` may run once;
/// a second call returns [`Error::BackwardTwice`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the loss passed to [`Tape::backward`] with respect to `v`.
    ///
    /// `None` before backward or for tensors that do not require a gradient;
    /// zeros for tensors that require one but are not reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if !self.backward_done || !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        let data = match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; numel(&shape)],
        };
        Some(Tensor { shape, data })
    }

    // ---- elementwise --------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let data = ops::binary(ta.data(), tb.data(), numel(&shape), f);
        Ok(self.push(Tensor { shape, data }, op, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// `x + c` for a constant `c`.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::Shift(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(ops::sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    /// Elementwise `f` whose backward multiplies by `df` evaluated at the
    /// input.
    pub fn elementwise(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var {
        let input = self.value(x);
        let value = input.map(f);
        let deriv = input.data().iter().map(|&v| df(v)).collect();
        self.push(value, Op::Elementwise(x, deriv), &[x])
    }

    /// Softmax over the last axis. `-inf` entries map to exactly zero.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t
            .shape()
            .last()
            .ok_or_else(|| Error::contract("softmax_rows on a scalar"))?;
        let data = ops::softmax_rows(t.data(), cols)?;
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    // ---- linear algebra -----------------------------------------------

    /// Batched product of `[..., m, k]` and `[..., k, n]`.
    ///
    /// Batch dimensions follow the elementwise broadcasting rule: equal,
    /// one side unbatched, or one batch shape a suffix of the other.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let dims = MatDims::new(ta.shape(), tb.shape())?;
        let mut data = vec![0.0; dims.batch * dims.m * dims.n];
        dims.for_each_pair(|t, ia, ib| {
            let (m, k, n) = (dims.m, dims.k, dims.n);
            if dims.fused() {
                gemm(dims.batch * m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut data);
            } else {
                gemm(
                    m,
                    k,
                    n,
                    &ta.data()[ia * m * k..],
                    false,
                    &tb.data()[ib * k * n..],
                    false,
                    0.0,
                    &mut data[t * m * n..],
                );
            }
        });
        let value = Tensor {
            shape: dims.out_shape.clone(),
            data,
        };
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::contract(format!(
                "mean_axis({axis}) on shape {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / len as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor { shape, data }, Op::MeanAxis(x, axis), &[x]))
    }

    /// Mean squared error between equal-shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: p.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let v = s / p.numel() as f64;
        Ok(self.push(Tensor::scalar(v), Op::Mse(pred, target), &[pred, target]))
    }

    // ---- layout -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        ops::check_perm(perm, t.rank())?;
        let (data, shape) = ops::permute(t.data(), t.shape(), perm);
        Ok(self.push(Tensor { shape, data }, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Rows of a `[rows, dim]` table selected by `ids`, giving `[ids.len(), dim]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let [rows, dim] = t.shape() else {
            return Err(Error::contract(format!(
                "gather_rows needs a matrix, got {:?}",
                t.shape()
            )));
        };
        let (rows, dim) = (*rows, *dim);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocabulary {
                    token: id,
                    vocab_size: rows,
                });
            }
            data.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
        }
        let value = Tensor {
            shape: vec![ids.len(), dim],
            data,
        };
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec()), &[table]))
    }

    /// Repeat every row of `[..., n, d]` `r` times in place: `[..., n·r, d]`.
    pub fn repeat_rows(&mut self, x: Var, r: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 || r == 0 {
            return Err(Error::contract(format!(
                "repeat_rows(r={r}) on shape {:?}",
                t.shape()
            )));
        }
        let d = t.shape()[t.rank() - 1];
        let mut data = Vec::with_capacity(t.numel() * r);
        if d > 0 {
            for row in t.data().chunks_exact(d) {
                for _ in 0..r {
                    data.extend_from_slice(row);
                }
            }
        }
        let mut shape = t.shape().to_vec();
        let rank = shape.len();
        shape[rank - 2] *= r;
        Ok(self.push(Tensor { shape, data }, Op::RepeatRows(x, r), &[x]))
    }

    // ---- fused --------------------------------------------------------

    /// Layer normalization over the last axis with per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = *tx.shape().last().unwrap_or(&0);
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let out = ops::layer_norm(tx.data(), tg.data(), tb.data(), eps);
        let value = Tensor {
            shape: tx.shape().to_vec(),
            data: out.y,
        };
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized: out.normalized,
            rstd: out.rstd,
        };
        Ok(self.push(value, op, &[x, gain, bias]))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    accumulate(ga, g.iter().copied());
                }
                if let Some(gb) = self.slot(grads, *b) {
                    accumulate(gb, g.iter().copied());
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    accumulate(ga, g.iter().copied());
                }
                if let Some(gb) = self.slot(grads, *b) {
                    accumulate(gb, g.iter().map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    accumulate(ga, g.iter().zip(db.iter().cycle()).map(|(v, y)| v * y));
                }
                if let Some(gb) = self.slot(grads, *b) {
                    accumulate(gb, g.iter().zip(da.iter().cycle()).map(|(v, x)| v * x));
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    accumulate(gx, g.iter().map(|v| v * c));
                }
            }
            Op::Shift(x) | Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    accumulate(gx, g.iter().copied());
                }
            }
            Op::Square(x) => {
                let dx = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    accumulate(gx, g.iter().zip(dx).map(|(v, x)| 2.0 * x * v));
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    accumulate(gx, g.iter().zip(out).map(|(v, s)| v * s * (1.0 - s)));
                }
            }
            Op::Elementwise(x, deriv) => {
                if let Some(gx) = self.slot(grads, *x) {
                    accumulate(gx, g.iter().zip(deriv).map(|(v, d)| v * d));
                }
            }
            Op::Relu(x) => {
                let dx = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    accumulate(
                        gx,
                        g.iter().zip(dx).map(|(v, x)| if *x > 0.0 { *v } else { 0.0 }),
                    );
                }
            }
            Op::Softmax(x) => {
                let cols = *node.value.shape().last().unwrap_or(&1);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((dst, s), gr) in gx
                        .chunks_exact_mut(cols)
                        .zip(out.chunks_exact(cols))
                        .zip(g.chunks_exact(cols))
                    {
                        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dst[j] += s[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let dims = MatDims::new(ta.shape(), tb.shape())?;
                let (m, k, n) = (dims.m, dims.k, dims.n);
                if let Some(ga) = self.slot(grads, *a) {
                    if dims.fused() {
                        gemm(dims.batch * m, n, k, g, false, tb.data(), true, 1.0, ga);
                    } else {
                        dims.for_each_pair(|t, ia, ib| {
                            gemm(
                                m,
                                n,
                                k,
                                &g[t * m * n..],
                                false,
                                &tb.data()[ib * k * n..],
                                true,
                                1.0,
                                &mut ga[ia * m * k..],
                            );
                        });
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if dims.fused() {
                        gemm(k, dims.batch * m, n, ta.data(), true, g, false, 1.0, gb);
                    } else {
                        dims.for_each_pair(|t, ia, ib| {
                            gemm(
                                k,
                                m,
                                n,
                                &ta.data()[ia * m * k..],
                                true,
                                &g[t * m * n..],
                                false,
                                1.0,
                                &mut gb[ib * k * n..],
                            );
                        });
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::MeanAll(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::MeanAxis(x, axis) => {
                let (outer, len, inner) = axis_split(self.value(*x).shape(), *axis);
                if let Some(gx) = self.slot(grads, *x) {
                    let inv = 1.0 / len as f64;
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s * inv;
                            }
                        }
                    }
                }
            }
            Op::Mse(p, t) => {
                let (dp, dt) = (self.value(*p).data(), self.value(*t).data());
                let c = 2.0 * g[0] / dp.len() as f64;
                if let Some(gp) = self.slot(grads, *p) {
                    accumulate(gp, dp.iter().zip(dt).map(|(a, b)| c * (a - b)));
                }
                if let Some(gt) = self.slot(grads, *t) {
                    accumulate(gt, dp.iter().zip(dt).map(|(a, b)| -c * (a - b)));
                }
            }
            Op::Permute(x, perm) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let inv = ops::inverse_perm(perm);
                    let (back, _) = ops::permute(g, node.value.shape(), &inv);
                    accumulate(gx, back.into_iter());
                }
            }
            Op::GatherRows(table, ids) => {
                let dim = node.value.shape()[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (row, &id) in g.chunks_exact(dim.max(1)).zip(ids) {
                        for (d, s) in gt[id * dim..(id + 1) * dim].iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            Op::RepeatRows(x, r) => {
                let d = *node.value.shape().last().unwrap_or(&1);
                if let Some(gx) = self.slot(grads, *x) {
                    if d > 0 {
                        for (i, row) in g.chunks_exact(d).enumerate() {
                            let dst = &mut gx[(i / r) * d..(i / r + 1) * d];
                            for (a, b) in dst.iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            } => {
                let gd = self.value(*gain).data();
                let d = gd.len();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gy = &g[r * d..(r + 1) * d];
                        let h = &normalized[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gy[j] * gd[j];
                            mean_dh += dh;
                            mean_dh_h += dh * h[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gy[j] * gd[j];
                            gx[r * d + j] += rs * (dh - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    accumulate(gg, g.iter().zip(normalized).map(|(a, b)| a * b));
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    accumulate(gb, g.iter().copied());
                }
            }
        }
        Ok(())
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

struct MatDims {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    batch_a: usize,
    batch_b: usize,
    out_shape: Vec<usize>,
}

impl MatDims {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (ra, rb) = (a.len(), b.len());
        let (m, k) = (a[ra - 2], a[ra - 1]);
        let (k2, n) = (b[rb - 2], b[rb - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_shape =
            broadcast_shape("matmul", &a[..ra - 2], &b[..rb - 2]).map_err(|_| mismatch())?;
        let mut out_shape = batch_shape.clone();
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            batch: numel(&batch_shape),
            batch_a: numel(&a[..ra - 2]),
            batch_b: numel(&b[..rb - 2]),
            out_shape,
        })
    }

    /// Right operand shared by every batch entry: one tall GEMM suffices.
    fn fused(&self) -> bool {
        self.batch_b == 1 && self.batch_a == self.batch
    }

    fn for_each_pair(&self, mut f: impl FnMut(usize, usize, usize)) {
        if self.fused() {
            f(0, 0, 0);
            return;
        }
        for t in 0..self.batch {
            f(t, t % self.batch_a, t % self.batch_b);
        }
    }
}
