//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every operation appends a node holding its forward value plus whatever
//! the backward rule needs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates adjoints. Leaves created with [`Tape::leaf`] receive a
//! gradient; [`Tape::constant`] leaves and everything computed only from
//! them are skipped.
//!
//! Grouped operations (`group_*`, `unfold`) treat a matrix of `G·g` rows as
//! `G` consecutive blocks of `g` rows, one block per window, so a whole
//! mini-batch of sequences travels through the tape as a single matrix.

use crate::error::{dim_err, Result};
use crate::numcore::ops::{self, Activation, Mode};
use crate::numcore::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::numcore::Tensor;

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
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Sin(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GroupMatMulNt(Var, Var, usize),
    GroupMatMul(Var, Var, usize),
    GroupMean(Var, usize),
    GroupMax(Var, Vec<usize>),
    GroupStep {
        x: Var,
        group: usize,
        step: usize,
    },
    Unfold {
        x: Var,
        group: usize,
        kernel: usize,
    },
    TileRows(Var),
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
    MeanAll(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::GroupMatMulNt(a, b, _)
            | Op::GroupMatMul(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Act(a, _)
            | Op::Sin(a)
            | Op::SoftmaxRows(a)
            | Op::Dropout(a, _)
            | Op::GroupMean(a, _)
            | Op::GroupMax(a, _)
            | Op::TileRows(a)
            | Op::MeanAll(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(parts) => parts.clone(),
            Op::SliceCols { x, .. } | Op::GroupStep { x, .. } | Op::Unfold { x, .. } => vec![*x],
            Op::Bce { p, .. } => vec![*p],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Probabilities are clamped to this margin inside the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `v`'s shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
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
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input such as a parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Data that never needs an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, "add")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds the vector `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let c = x.cols();
        if b.len() != c {
            return dim_err(format!(
                "row bias {:?} does not match width {c}",
                b.shape()
            ));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    /// `a·w + b`, the affine map used by every dense layer.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let out = ops::activation(self.value(a), kind);
        self.push(out, Op::Act(a, kind))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sin);
        self.push(out, Op::Sin(a))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut data = x.data().to_vec();
        ops::softmax_rows_in_place(&mut data, x.cols());
        let out = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != d || b.len() != d {
            return dim_err(format!(
                "layer_norm over width {d} with gain {:?} / bias {:?}",
                g.shape(),
                b.shape()
            ));
        }
        let stats = ops::normalize_rows(xv.data(), d, eps);
        let mut data = stats.xhat.clone();
        for row in data.chunks_mut(d) {
            for ((v, gv), bv) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *v = *v * gv + bv;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: stats.xhat,
                inv_std: stats.inv_std,
            },
        ))
    }

    /// Inverted dropout; eval mode (or a zero rate) returns `x` untouched.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, seed: u64) -> Result<Var> {
        ops::check_dropout_rate(rate)?;
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let mask = ops::dropout_mask(xv.len(), rate, seed);
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout(x, mask)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return dim_err("concat_cols row counts differ");
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if len == 0 || start + len > c {
            return dim_err(format!("column slice {start}..{} of width {c}", start + len));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    fn check_groups(&self, x: Var, group: usize) -> Result<usize> {
        let rows = self.value(x).rows();
        if group == 0 || !rows.is_multiple_of(group) {
            return dim_err(format!("{rows} rows do not split into groups of {group}"));
        }
        Ok(rows / group)
    }

    /// Within each block of `group` rows: `a_blk · b_blkᵀ`, giving `G·g × g`.
    pub fn group_matmul_nt(&mut self, a: Var, b: Var, group: usize) -> Result<Var> {
        let blocks = self.check_groups(a, group)?;
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, "group_matmul_nt")?;
        let d = av.cols();
        let mut out = vec![0.0; blocks * group * group];
        for blk in 0..blocks {
            let rows = blk * group * d..(blk + 1) * group * d;
            gemm_nt_acc(
                &av.data()[rows.clone()],
                &bv.data()[rows],
                &mut out[blk * group * group..(blk + 1) * group * group],
                group,
                d,
                group,
            );
        }
        let out = Tensor::matrix(blocks * group, group, out)?;
        Ok(self.push(out, Op::GroupMatMulNt(a, b, group)))
    }

    /// Within each block: `a_blk (g×g) · b_blk (g×d)`, giving `G·g × d`.
    pub fn group_matmul(&mut self, a: Var, b: Var, group: usize) -> Result<Var> {
        let blocks = self.check_groups(a, group)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != group || bv.rows() != av.rows() {
            return dim_err(format!(
                "group_matmul {:?} x {:?} with group {group}",
                av.shape(),
                bv.shape()
            ));
        }
        let d = bv.cols();
        let mut out = vec![0.0; blocks * group * d];
        for blk in 0..blocks {
            gemm_acc(
                &av.data()[blk * group * group..(blk + 1) * group * group],
                &bv.data()[blk * group * d..(blk + 1) * group * d],
                &mut out[blk * group * d..(blk + 1) * group * d],
                group,
                group,
                d,
            );
        }
        let out = Tensor::matrix(blocks * group, d, out)?;
        Ok(self.push(out, Op::GroupMatMul(a, b, group)))
    }

    /// Column means of each block: `G × d`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let blocks = self.check_groups(x, group)?;
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = vec![0.0; blocks * d];
        for blk in 0..blocks {
            let o = &mut out[blk * d..(blk + 1) * d];
            for r in 0..group {
                for (ov, v) in o.iter_mut().zip(xv.row(blk * group + r)) {
                    *ov += v;
                }
            }
            o.iter_mut().for_each(|v| *v /= group as f64);
        }
        let out = Tensor::matrix(blocks, d, out)?;
        Ok(self.push(out, Op::GroupMean(x, group)))
    }

    /// Column maxima of each block: `G × d`. Ties resolve to the earliest row.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let blocks = self.check_groups(x, group)?;
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = vec![f64::NEG_INFINITY; blocks * d];
        let mut arg = vec![0usize; blocks * d];
        for blk in 0..blocks {
            for r in 0..group {
                let row_idx = blk * group + r;
                for (c, &v) in xv.row(row_idx).iter().enumerate() {
                    if v > out[blk * d + c] {
                        out[blk * d + c] = v;
                        arg[blk * d + c] = row_idx;
                    }
                }
            }
        }
        let out = Tensor::matrix(blocks, d, out)?;
        Ok(self.push(out, Op::GroupMax(x, arg)))
    }

    /// Row `step` of every block: `G × d`.
    pub fn group_step(&mut self, x: Var, group: usize, step: usize) -> Result<Var> {
        let blocks = self.check_groups(x, group)?;
        if step >= group {
            return dim_err(format!("step {step} outside group of {group}"));
        }
        let xv = self.value(x);
        let d = xv.cols();
        let mut data = Vec::with_capacity(blocks * d);
        for blk in 0..blocks {
            data.extend_from_slice(xv.row(blk * group + step));
        }
        let out = Tensor::matrix(blocks, d, data)?;
        Ok(self.push(out, Op::GroupStep { x, group, step }))
    }

    /// Sliding windows of `kernel` consecutive rows within each block,
    /// flattened: `G·(g−kernel+1) × kernel·d`. Row `j` of a window's output
    /// holds input rows `j..j+kernel` laid end to end.
    pub fn unfold(&mut self, x: Var, group: usize, kernel: usize) -> Result<Var> {
        let blocks = self.check_groups(x, group)?;
        if kernel == 0 || kernel > group {
            return dim_err(format!("kernel {kernel} does not fit group {group}"));
        }
        let xv = self.value(x);
        let d = xv.cols();
        let positions = group - kernel + 1;
        let mut data = Vec::with_capacity(blocks * positions * kernel * d);
        for blk in 0..blocks {
            for j in 0..positions {
                for q in 0..kernel {
                    data.extend_from_slice(xv.row(blk * group + j + q));
                }
            }
        }
        let out = Tensor::matrix(blocks * positions, kernel * d, data)?;
        Ok(self.push(out, Op::Unfold { x, group, kernel }))
    }

    /// Stacks `times` copies of `x` vertically.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return dim_err("tile_rows by zero");
        }
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let data = xv.data().repeat(times);
        let out = Tensor::matrix(r * times, c, data)?;
        Ok(self.push(out, Op::TileRows(x)))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `targets`.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != targets.len() {
            return dim_err(format!(
                "{} probabilities for {} targets",
                pv.len(),
                targets.len()
            ));
        }
        let loss = bce_mean(pv.data(), targets);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(x))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return dim_err(format!("backward from non-scalar {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients(
            grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    g.map(|data| {
                        Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                            .expect("gradient matches value shape")
                    })
                })
                .collect(),
        ))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(*a, &mut |ga| gemm_nt_acc(g, bv.data(), ga, m, n, k));
                acc(*b, &mut |gb| gemm_tn_acc(av.data(), g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |ga| add_into(ga, g));
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let c = self.value(*b).len();
                acc(*b, &mut |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(av.data()) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                for (o, gi) in ga.iter_mut().zip(g) {
                    *o += gi * s;
                }
            }),
            Op::Act(a, kind) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * kind.derivative(x[i], y[i]);
                    }
                });
            }
            Op::Sin(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * x[i].cos();
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                acc(*a, &mut |ga| {
                    for ((gr, yr), orow) in g.chunks(c).zip(y.data().chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            orow[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                acc(*gain, &mut |gg| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    let rows = g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d));
                    for (r, ((gr, xr), orow)) in rows.enumerate() {
                        let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum: f64 = dxhat.iter().sum();
                        let dot: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            orow[j] += scale * (d as f64 * dxhat[j] - sum - xr[j] * dot);
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => acc(*a, &mut |ga| {
                for ((o, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                    *o += gi * m;
                }
            }),
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |gp| {
                        for (grow, orow) in g.chunks(total).zip(gp.chunks_mut(w)) {
                            add_into(orow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let c = self.value(*x).cols();
                acc(*x, &mut |gx| {
                    for (grow, orow) in g.chunks(w).zip(gx.chunks_mut(c)) {
                        add_into(&mut orow[*start..*start + w], grow);
                    }
                });
            }
            Op::GroupMatMulNt(a, b, group) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (gs, d) = (*group, av.cols());
                let blocks = av.rows() / gs;
                acc(*a, &mut |ga| {
                    for blk in 0..blocks {
                        gemm_acc(
                            &g[blk * gs * gs..(blk + 1) * gs * gs],
                            &bv.data()[blk * gs * d..(blk + 1) * gs * d],
                            &mut ga[blk * gs * d..(blk + 1) * gs * d],
                            gs,
                            gs,
                            d,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for blk in 0..blocks {
                        gemm_tn_acc(
                            &g[blk * gs * gs..(blk + 1) * gs * gs],
                            &av.data()[blk * gs * d..(blk + 1) * gs * d],
                            &mut gb[blk * gs * d..(blk + 1) * gs * d],
                            gs,
                            gs,
                            d,
                        );
                    }
                });
            }
            Op::GroupMatMul(a, b, group) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (gs, d) = (*group, bv.cols());
                let blocks = av.rows() / gs;
                acc(*a, &mut |ga| {
                    for blk in 0..blocks {
                        gemm_nt_acc(
                            &g[blk * gs * d..(blk + 1) * gs * d],
                            &bv.data()[blk * gs * d..(blk + 1) * gs * d],
                            &mut ga[blk * gs * gs..(blk + 1) * gs * gs],
                            gs,
                            d,
                            gs,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for blk in 0..blocks {
                        gemm_tn_acc(
                            &av.data()[blk * gs * gs..(blk + 1) * gs * gs],
                            &g[blk * gs * d..(blk + 1) * gs * d],
                            &mut gb[blk * gs * d..(blk + 1) * gs * d],
                            gs,
                            gs,
                            d,
                        );
                    }
                });
            }
            Op::GroupMean(x, group) => {
                let d = node.value.cols();
                let inv = 1.0 / *group as f64;
                acc(*x, &mut |gx| {
                    for (r, orow) in gx.chunks_mut(d).enumerate() {
                        let grow = &g[(r / group) * d..(r / group + 1) * d];
                        for (o, gi) in orow.iter_mut().zip(grow) {
                            *o += gi * inv;
                        }
                    }
                });
            }
            Op::GroupMax(x, arg) => {
                let d = node.value.cols();
                acc(*x, &mut |gx| {
                    for (i, &row_idx) in arg.iter().enumerate() {
                        gx[row_idx * d + i % d] += g[i];
                    }
                });
            }
            Op::GroupStep { x, group, step } => {
                let d = node.value.cols();
                acc(*x, &mut |gx| {
                    for (blk, grow) in g.chunks(d).enumerate() {
                        let r = blk * group + step;
                        add_into(&mut gx[r * d..(r + 1) * d], grow);
                    }
                });
            }
            Op::Unfold { x, group, kernel } => {
                let d = self.value(*x).cols();
                let positions = group - kernel + 1;
                acc(*x, &mut |gx| {
                    for (out_row, grow) in g.chunks(kernel * d).enumerate() {
                        let blk = out_row / positions;
                        let j = out_row % positions;
                        for q in 0..*kernel {
                            let r = blk * group + j + q;
                            add_into(&mut gx[r * d..(r + 1) * d], &grow[q * d..(q + 1) * d]);
                        }
                    }
                });
            }
            Op::TileRows(x) => {
                let n = self.value(*x).len();
                acc(*x, &mut |gx| {
                    for chunk in g.chunks(n) {
                        add_into(gx, chunk);
                    }
                });
            }
            Op::Bce { p, targets } => {
                let pv = self.value(*p).data();
                let n = targets.len() as f64;
                acc(*p, &mut |gp| {
                    for i in 0..gp.len() {
                        gp[i] += g[0] * bce_grad(pv[i], targets[i]) / n;
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean binary cross-entropy with clamped probabilities.
pub fn bce_mean(p: &[f64], y: &[f64]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / p.len() as f64
}

/// dL/dp for a single sample; zero where the clamp is active.
pub fn bce_grad(p: f64, y: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    (p - y) / (p * (1.0 - p))
}
