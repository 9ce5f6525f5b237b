//! Reverse-mode differentiation over a tape of matrix-valued operations.
//!
//! A forward pass appends one [`Node`] per operation; node ids are handed out
//! in evaluation order, so walking the tape backwards is a valid reverse
//! topological order. Nodes that do not depend on a parameter (or an input
//! marked as differentiable) are skipped during the backward sweep.

use std::borrow::Cow;

use crate::error::{Result, SonarError};
use crate::losses;
use crate::nn::functional::{gelu, gelu_derivative, log_sum_exp, softmax_in_place, softmax_rows};
use crate::nn::{ParamId, ParamStore, Tensor2};
use crate::srm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Affine {
        x: NodeId,
        scale: f64,
    },
    Gelu(NodeId),
    Softmax(NodeId),
    Standardize {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    Frames {
        x: NodeId,
        kernel: usize,
        stride: usize,
    },
    SrmResidual {
        x: NodeId,
        kernels: NodeId,
        mix: NodeId,
        bias: NodeId,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<Tensor2>,
    },
    AddPositional(NodeId, NodeId),
    MeanRows(NodeId),
    ConcatCols(NodeId, NodeId),
    SumAll(NodeId),
    FramewiseJs(NodeId, NodeId),
    WeightedCe {
        logits: NodeId,
        label: usize,
        weight: f64,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor2>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation. Parameter values are borrowed from the
/// [`ParamStore`], so a tape cannot outlive the parameters it reads.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients of one scalar root with respect to every node on a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor2> {
        self.grads[id.0].as_ref()
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(SonarError::Shape(msg))
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor2) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// An input whose gradient is tracked and readable from [`Gradients`].
    pub fn input_with_grad(&mut self, value: Tensor2) -> NodeId {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param(id),
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, store: &'p ParamStore, name: &str) -> Result<NodeId> {
        Ok(self.param(store, store.id(name)?))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a + b` with `b` a `1 x cols` row broadcast over the rows of `a`.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return shape_err(format!(
                "bias {:?} for activations {:?}",
                bv.shape(),
                av.shape()
            ));
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (o, b) in v.row_mut(r).iter_mut().zip(bv.as_slice()) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::AddBias(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(x).map(|e| scale * e + shift);
        let rg = self.rg(&[x]);
        self.push(v, Op::Affine { x, scale }, rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v, Op::Softmax(x), rg)
    }

    /// Rescales each row to zero mean and unit variance, with `eps` added
    /// to the variance.
    pub fn standardize_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        let mut v = self.value(x).clone();
        let n = v.cols() as f64;
        let mut inv_std = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|e| *e = (*e - mean) * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(&[x]);
        self.push(v, Op::Standardize { x, inv_std }, rg)
    }

    /// Cuts a `1 x T` waveform into `ceil(T / stride)` frames of `kernel`
    /// samples, zero-padded past the end.
    pub fn frames(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rows() != 1 || xv.cols() == 0 || kernel == 0 || stride == 0 {
            return shape_err(format!(
                "frames of {:?} with kernel {kernel} stride {stride}",
                xv.shape()
            ));
        }
        let t = xv.cols();
        let n_frames = t.div_ceil(stride);
        let src = xv.as_slice();
        let mut out = Tensor2::zeros(n_frames, kernel);
        for f in 0..n_frames {
            let start = f * stride;
            let end = (start + kernel).min(t);
            out.row_mut(f)[..end - start].copy_from_slice(&src[start..end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Frames { x, kernel, stride }, rg))
    }

    /// Constrained filter bank followed by the 1x1 channel mix.
    pub fn srm_residual(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        mix: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let (xv, kv, mv, bv) = (
            self.value(x),
            self.value(kernels),
            self.value(mix),
            self.value(bias),
        );
        if xv.rows() != 1
            || kv.cols() != srm::KERNEL_LEN
            || mv.shape() != (1, kv.rows())
            || bv.shape() != (1, 1)
        {
            return shape_err(format!(
                "srm residual: signal {:?}, kernels {:?}, mix {:?}, bias {:?}",
                xv.shape(),
                kv.shape(),
                mv.shape(),
                bv.shape()
            ));
        }
        if xv.cols() < srm::KERNEL_LEN {
            return Err(SonarError::InvalidInput(format!(
                "signal of {} samples is shorter than the filter",
                xv.cols()
            )));
        }
        let eff = srm::effective_kernel(kv, mv.as_slice());
        let mut out = srm::correlate(xv.as_slice(), &eff);
        let b = bv.item();
        out.iter_mut().for_each(|o| *o += b);
        let rg = self.rg(&[x, kernels, mix, bias]);
        Ok(self.push(
            Tensor2::row_vector(out),
            Op::SrmResidual {
                x,
                kernels,
                mix,
                bias,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention on already projected
    /// queries, keys and values. Heads split the columns evenly.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("{d} columns do not split into {heads} heads"));
        }
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() || kv.rows() == 0 {
            return shape_err(format!(
                "attention q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor2::zeros(qv.rows(), d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = qv.cols_slice(h * dh, dh);
            let kh = kv.cols_slice(h * dh, dh);
            let vh = vv.cols_slice(h * dh, dh);
            let mut s = qh.matmul_nt(&kh)?;
            for r in 0..s.rows() {
                let row = s.row_mut(r);
                row.iter_mut().for_each(|e| *e *= scale);
                softmax_in_place(row);
            }
            out.write_cols(h * dh, &s.matmul(&vh)?);
            probs.push(s);
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// `a + pos[..rows(a)]`; `pos` may hold more rows than `a`.
    pub fn add_positional(&mut self, a: NodeId, pos: NodeId) -> Result<NodeId> {
        let (av, pv) = (self.value(a), self.value(pos));
        if pv.cols() != av.cols() || pv.rows() < av.rows() {
            return Err(SonarError::InvalidInput(format!(
                "{} frames exceed the {} positions of the embedding table",
                av.rows(),
                pv.rows()
            )));
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (o, p) in v.row_mut(r).iter_mut().zip(pv.row(r)) {
                *o += p;
            }
        }
        let rg = self.rg(&[a, pos]);
        Ok(self.push(v, Op::AddPositional(a, pos), rg))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).rows() == 0 {
            return Err(SonarError::InvalidInput("mean over zero frames".into()));
        }
        let v = self.value(x).mean_rows();
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::MeanRows(x), rg))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return shape_err(format!("concat {:?} with {:?}", av.shape(), bv.shape()));
        }
        let mut v = Tensor2::zeros(av.rows(), av.cols() + bv.cols());
        v.write_cols(0, av);
        v.write_cols(av.cols(), bv);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::ConcatCols(a, b), rg))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).as_slice().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor2::scalar(s), Op::SumAll(x), rg)
    }

    /// Mean over rows of the base-2 Jensen-Shannon divergence between
    /// matching rows of two row-stochastic matrices.
    pub fn framewise_js(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.shape() != qv.shape() || pv.rows() == 0 {
            return shape_err(format!("js of {:?} and {:?}", pv.shape(), qv.shape()));
        }
        let mut acc = 0.0;
        for r in 0..pv.rows() {
            acc += losses::js_row(pv.row(r), qv.row(r));
        }
        let js = (acc / pv.rows() as f64).clamp(0.0, 1.0);
        let rg = self.rg(&[p, q]);
        Ok(self.push(Tensor2::scalar(js), Op::FramewiseJs(p, q), rg))
    }

    /// `-weight * ln softmax(logits)[label]` for a `1 x C` logit row.
    pub fn weighted_ce(&mut self, logits: NodeId, label: usize, weight: f64) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rows() != 1 || label >= lv.cols() {
            return shape_err(format!("cross-entropy on {:?} label {label}", lv.shape()));
        }
        let row = lv.row(0);
        let loss = -weight * (row[label] - log_sum_exp(row));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor2::scalar(loss),
            Op::WeightedCe {
                logits,
                label,
                weight,
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar `root`, seeding its gradient with `seed`.
    pub fn backward(&self, root: NodeId, seed: f64) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return shape_err(format!(
                "backward from non-scalar {:?}",
                self.value(root).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor2::scalar(seed));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor2>], id: NodeId, g: Tensor2) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<'p>, g: &Tensor2, grads: &mut [Option<Tensor2>]) -> Result<()> {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    let ga = g.matmul_nt(self.value(b))?;
                    self.accumulate(grads, a, ga);
                }
                if self.wants(b) {
                    let gb = self.value(a).matmul_tn(g)?;
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::AddBias(a, b) => {
                if self.wants(b) {
                    let mut gb = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (o, v) in gb.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, b, Tensor2::row_vector(gb));
                }
                self.accumulate(grads, a, g.clone());
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Affine { x, scale } => self.accumulate(grads, x, g.scale(scale)),
            &Op::Gelu(x) => {
                let xv = self.value(x);
                let mut gx = g.clone();
                for (o, &xi) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    *o *= gelu_derivative(xi);
                }
                self.accumulate(grads, x, gx);
            }
            &Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = Tensor2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dotp);
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::Standardize { x, inv_std } => {
                let y = &node.value;
                let n = y.cols() as f64;
                let mut gx = Tensor2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, &yi), &gi) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = inv_std[r] * (gi - g_mean - yi * gy_mean);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            &Op::Frames { x, kernel, stride } => {
                let t = self.value(x).cols();
                let mut gx = vec![0.0; t];
                for f in 0..g.rows() {
                    let start = f * stride;
                    let end = (start + kernel).min(t);
                    for (o, v) in gx[start..end].iter_mut().zip(g.row(f)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, x, Tensor2::row_vector(gx));
            }
            &Op::SrmResidual {
                x,
                kernels,
                mix,
                bias,
            } => {
                let xs = self.value(x).as_slice();
                let kv = self.value(kernels);
                let mv = self.value(mix);
                let gs = g.as_slice();
                if self.wants(bias) {
                    self.accumulate(grads, bias, Tensor2::scalar(gs.iter().sum()));
                }
                if self.wants(kernels) || self.wants(mix) {
                    // c[k] = sum_t g[t] * x[t + k - 2]
                    let c = srm::tap_correlations(xs, gs);
                    if self.wants(mix) {
                        let gm = (0..kv.rows())
                            .map(|i| kv.row(i).iter().zip(&c).map(|(w, c)| w * c).sum())
                            .collect();
                        self.accumulate(grads, mix, Tensor2::row_vector(gm));
                    }
                    if self.wants(kernels) {
                        let mut gk = Tensor2::zeros(kv.rows(), kv.cols());
                        for i in 0..kv.rows() {
                            let m = mv.as_slice()[i];
                            for (o, c) in gk.row_mut(i).iter_mut().zip(&c) {
                                *o = m * c;
                            }
                        }
                        self.accumulate(grads, kernels, gk);
                    }
                }
                if self.wants(x) {
                    let eff = srm::effective_kernel(kv, mv.as_slice());
                    let gx = srm::correlate_transpose(gs, &eff);
                    self.accumulate(grads, x, Tensor2::row_vector(gx));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Tensor2::zeros(qv.rows(), d);
                let mut gk = Tensor2::zeros(kv.rows(), d);
                let mut gv = Tensor2::zeros(vv.rows(), d);
                for (h, p) in probs.iter().enumerate() {
                    let go = g.cols_slice(h * dh, dh);
                    let vh = vv.cols_slice(h * dh, dh);
                    gv.write_cols(h * dh, &p.matmul_tn(&go)?);
                    let dp = go.matmul_nt(&vh)?;
                    let mut ds = Tensor2::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let (pr, dr) = (p.row(r), dp.row(r));
                        let dotp: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for ((o, &pi), &di) in ds.row_mut(r).iter_mut().zip(pr).zip(dr) {
                            *o = pi * (di - dotp) * scale;
                        }
                    }
                    let kh = kv.cols_slice(h * dh, dh);
                    let qh = qv.cols_slice(h * dh, dh);
                    gq.write_cols(h * dh, &ds.matmul(&kh)?);
                    gk.write_cols(h * dh, &ds.matmul_tn(&qh)?);
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            &Op::AddPositional(a, pos) => {
                if self.wants(pos) {
                    let pv = self.value(pos);
                    let mut gp = Tensor2::zeros(pv.rows(), pv.cols());
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, pos, gp);
                }
                self.accumulate(grads, a, g.clone());
            }
            &Op::MeanRows(x) => {
                let rows = self.value(x).rows();
                let inv = 1.0 / rows as f64;
                let mut gx = Tensor2::zeros(rows, g.cols());
                for r in 0..rows {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.as_slice()) {
                        *o = v * inv;
                    }
                }
                self.accumulate(grads, x, gx);
            }
            &Op::ConcatCols(a, b) => {
                let ca = self.value(a).cols();
                let cb = self.value(b).cols();
                self.accumulate(grads, a, g.cols_slice(0, ca));
                self.accumulate(grads, b, g.cols_slice(ca, cb));
            }
            &Op::SumAll(x) => {
                let (r, c) = self.value(x).shape();
                self.accumulate(grads, x, Tensor2::filled(r, c, g.item()));
            }
            &Op::FramewiseJs(p, q) => {
                let (pv, qv) = (self.value(p), self.value(q));
                let scale = g.item() / pv.rows() as f64;
                let mut gp = Tensor2::zeros(pv.rows(), pv.cols());
                let mut gq = Tensor2::zeros(qv.rows(), qv.cols());
                for r in 0..pv.rows() {
                    losses::js_row_grad(pv.row(r), qv.row(r), scale, gp.row_mut(r), gq.row_mut(r));
                }
                self.accumulate(grads, p, gp);
                self.accumulate(grads, q, gq);
            }
            &Op::WeightedCe {
                logits,
                label,
                weight,
            } => {
                let mut p = self.value(logits).as_slice().to_vec();
                softmax_in_place(&mut p);
                p[label] -= 1.0;
                let s = weight * g.item();
                p.iter_mut().for_each(|e| *e *= s);
                self.accumulate(grads, logits, Tensor2::row_vector(p));
            }
        }
        Ok(())
    }

    /// Collects parameter gradients in store order; parameters absent from
    /// the tape get zero buffers.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor2> {
        let mut out: Vec<Tensor2> = store
            .values()
            .iter()
            .map(|v| Tensor2::zeros(v.rows(), v.cols()))
            .collect();
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                out[id.index()].add_assign(g);
            }
        }
        out
    }
}
