//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only arena: every op pushes a node whose inputs
//! already exist, so insertion order is a topological order and `backward`
//! is a single reverse sweep. Gradients accumulate in a fixed order, which
//! keeps results bit-reproducible.

mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use kernels::ConvGeom;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Sum(NodeId),
    Mean(NodeId),
    Relu(NodeId),
    Reshape(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        cols: Vec<F>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    L2Normalize {
        x: NodeId,
        norms: Vec<F>,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    SoftmaxCe {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    TripletMargin {
        a: NodeId,
        p: NodeId,
        n: NodeId,
        margin: F,
        d_ap: Vec<F>,
        d_an: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// Batch-norm evaluation source: batch statistics or fixed running statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, F> {
    Train,
    Eval { mean: &'a [F], var: &'a [F] },
}

/// Per-channel batch statistics (biased variance) from a training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    /// Number of elements per channel that produced the statistics.
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Result of [`Graph::backward`]: one gradient slot per node.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Element> Gradients<F> {
    /// Gradient of the loss w.r.t. `id`; all zeros when nothing flowed back.
    pub fn get(&self, id: NodeId) -> Tensor<F> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<F> {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable leaf (data, targets).
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<(Tensor<F>, bool)> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok((out, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> NodeId {
        let v = self.value(x).map(|e| e * s);
        let rg = self.rg(x);
        self.push(Op::Scale(x, s), v, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let s: F = t.data().iter().copied().sum();
        let m = s / F::of(t.len().max(1) as f64);
        let rg = self.rg(x);
        self.push(Op::Mean(x), Tensor::scalar(m), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| if e > F::zero() { e } else { F::zero() });
        let rg = self.rg(x);
        self.push(Op::Relu(x), v, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), v, rg))
    }

    /// Flattens `[N, ...]` to `[N, rest]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// `y = x·wᵀ + b` with `x:[N,In]`, `w:[Out,In]`, `b:[Out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (n, fin) = self.value(x).dims2()?;
        let (fout, win) = self.value(w).dims2()?;
        if fin != win {
            return Err(Error::shape("linear", format!("input width {fin} vs weight {fout}x{win}")));
        }
        let mut out = vec![F::zero(); n * fout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [fout] {
                return Err(Error::shape("linear", format!("bias {:?} for width {fout}", bv.shape())));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        F::gemm(
            n,
            fin,
            fout,
            F::one(),
            self.value(x).data(),
            fin as isize,
            1,
            self.value(w).data(),
            1,
            fin as isize,
            beta,
            &mut out,
            fout as isize,
            1,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let v = Tensor::new(vec![n, fout], out)?;
        Ok(self.push(Op::Linear { x, w, b }, v, rg))
    }

    /// Cross-correlation of `x:[N,C,H,W]` with `k:[K,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (kk, kc, kh, kw) = self.value(k).dims4()?;
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if kc != c {
            return Err(Error::shape("conv2d", format!("kernel has {kc} channels, input has {c}")));
        }
        let (span_h, span_w) = (h + 2 * pad, w + 2 * pad);
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("non-integral output size for {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [kk] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {kk} filters", self.value(b).shape())));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            k: kk,
            kh,
            kw,
            stride,
            pad,
            ho: (span_h - kh) / stride + 1,
            wo: (span_w - kw) / stride + 1,
        };
        let (out, cols) = kernels::conv_forward(
            &geom,
            self.value(x).data(),
            self.value(k).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        let v = Tensor::new(vec![n, kk, geom.ho, geom.wo], out)?;
        Ok(self.push(Op::Conv2d { x, k, b, geom, cols }, v, rg))
    }

    /// Per-channel normalization of `[N,C,H,W]`. In train mode the batch
    /// statistics are returned so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: NormMode<'_, F>,
        eps: F,
    ) -> Result<(NodeId, Option<BatchStats<F>>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("batch_norm", format!("affine params must have shape [{c}]")));
        }
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if n * hw < 2 {
                    return Err(Error::InvalidArgument(
                        "batch_norm in train mode needs at least 2 values per channel".into(),
                    ));
                }
                let (m, v) = kernels::channel_moments(self.value(x).data(), n, c, hw);
                let stats = BatchStats {
                    mean: m.clone(),
                    var: v.clone(),
                    count: n * hw,
                };
                (m, v, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running stats width".to_string()));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![F::zero(); xv.len()];
        let mut out = vec![F::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    let xh = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = Tensor::new(vec![n, c, h, w], out)?;
        let id = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: stats.is_some(),
            },
            v,
            rg,
        );
        Ok((id, stats))
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::shape("max_pool2", format!("input {h}x{w} too small")));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), n, c, h, w);
        let rg = self.rg(x);
        let v = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        Ok(self.push(Op::MaxPool2 { x, argmax }, v, rg))
    }

    /// Scales each row of `[N,D]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2()?;
        let floor = F::of(1e-12);
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![F::zero(); n * d];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let nrm = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(floor);
            norms.push(nrm);
            for j in 0..d {
                out[i * d + j] = row[j] / nrm;
            }
        }
        let rg = self.rg(x);
        let v = Tensor::new(vec![n, d], out)?;
        Ok(self.push(Op::L2Normalize { x, norms }, v, rg))
    }

    /// Rows of `x` in the given order (repeats allowed).
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let n = self.value(x).shape()[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n}")));
        }
        let v = self.value(x).select_rows(rows);
        let rg = self.rg(x);
        Ok(self.push(
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            v,
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let n = self.value(x).shape()[0];
        if start > end || end > n {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {n}")));
        }
        let rows: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &rows)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, c) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("cross entropy of an empty batch".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![F::zero(); n * c];
        let mut total = F::zero();
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p = *p / z;
            }
            total += z.ln() + max - row[labels[i]];
        }
        let loss = total / F::of(n as f64);
        if !loss.is_finite() {
            return Err(Error::NonFinite("softmax_cross_entropy".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Mean over the batch of `max(0, ‖a−p‖ − ‖a−n‖ + margin)`.
    pub fn triplet_margin_loss(
        &mut self,
        a: NodeId,
        p: NodeId,
        n: NodeId,
        margin: F,
    ) -> Result<NodeId> {
        let (rows, d) = self.value(a).dims2()?;
        for other in [p, n] {
            if self.value(other).shape() != [rows, d] {
                return Err(Error::shape(
                    "triplet_margin_loss",
                    format!("{:?} vs {:?}", self.value(other).shape(), [rows, d]),
                ));
            }
        }
        if rows == 0 {
            return Err(Error::InvalidArgument("triplet loss of an empty batch".into()));
        }
        let dist = |u: &[F], v: &[F]| -> F {
            u.iter().zip(v).map(|(&x, &y)| (x - y) * (x - y)).sum::<F>().sqrt()
        };
        let (av, pv, nv) = (self.value(a).data(), self.value(p).data(), self.value(n).data());
        let mut d_ap = Vec::with_capacity(rows);
        let mut d_an = Vec::with_capacity(rows);
        let mut total = F::zero();
        for i in 0..rows {
            let r = i * d..(i + 1) * d;
            let dp = dist(&av[r.clone()], &pv[r.clone()]);
            let dn = dist(&av[r.clone()], &nv[r]);
            total += (dp - dn + margin).max(F::zero());
            d_ap.push(dp);
            d_an.push(dn);
        }
        let loss = total / F::of(rows as f64);
        let rg = self.rg(a) || self.rg(p) || self.rg(n);
        Ok(self.push(
            Op::TripletMargin {
                a,
                p,
                n,
                margin,
                d_ap,
                d_an,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(gout);
                continue;
            }
            self.propagate(&node.op, &node.value, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_vec(&self, grads: &mut [Option<Tensor<F>>], id: NodeId, g: Vec<F>) {
        let shape = self.value(id).shape().to_vec();
        let t = Tensor::new(shape, g).expect("gradient matches node shape");
        self.accumulate(grads, id, t);
    }

    fn propagate(
        &self,
        op: &Op<F>,
        out: &Tensor<F>,
        gout: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let g = gout.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = g.iter().zip(vb).map(|(&d, &y)| d * y).collect();
                let gb = g.iter().zip(va).map(|(&d, &x)| d * x).collect();
                self.accumulate_vec(grads, *a, ga);
                self.accumulate_vec(grads, *b, gb);
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, gout.map(|v| v * *s)),
            Op::Sum(x) => {
                let t = Tensor::full(self.value(*x).shape(), g[0]);
                self.accumulate(grads, *x, t);
            }
            Op::Mean(x) => {
                let n = F::of(self.value(*x).len().max(1) as f64);
                let t = Tensor::full(self.value(*x).shape(), g[0] / n);
                self.accumulate(grads, *x, t);
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(&d, &y)| if y > F::zero() { d } else { F::zero() })
                    .collect();
                self.accumulate_vec(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let t = gout.clone().reshape(self.value(*x).shape()).expect("same size");
                self.accumulate(grads, *x, t);
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = self.value(*x).dims2().expect("checked at forward");
                let fout = out.shape()[1];
                if self.rg(*x) {
                    let mut gx = vec![F::zero(); n * fin];
                    F::gemm(
                        n,
                        fout,
                        fin,
                        F::one(),
                        g,
                        fout as isize,
                        1,
                        self.value(*w).data(),
                        fin as isize,
                        1,
                        F::zero(),
                        &mut gx,
                        fin as isize,
                        1,
                    );
                    self.accumulate_vec(grads, *x, gx);
                }
                if self.rg(*w) {
                    let mut gw = vec![F::zero(); fout * fin];
                    F::gemm(
                        fout,
                        n,
                        fin,
                        F::one(),
                        g,
                        1,
                        fout as isize,
                        self.value(*x).data(),
                        fin as isize,
                        1,
                        F::zero(),
                        &mut gw,
                        fin as isize,
                        1,
                    );
                    self.accumulate_vec(grads, *w, gw);
                }
                if let Some(b) = b {
                    let mut gb = vec![F::zero(); fout];
                    for row in g.chunks(fout) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate_vec(grads, *b, gb);
                }
            }
            Op::Conv2d { x, k, b, geom, cols } => {
                let (gx, gk, gb) =
                    kernels::conv_backward(geom, cols, self.value(*k).data(), g, self.rg(*x));
                if let Some(gx) = gx {
                    self.accumulate_vec(grads, *x, gx);
                }
                self.accumulate_vec(grads, *k, gk);
                if let Some(b) = b {
                    self.accumulate_vec(grads, *b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = out.dims4().expect("rank 4");
                let hw = h * w;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * hw;
                        for j in off..off + hw {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut gx = vec![F::zero(); g.len()];
                    let m = F::of((n * hw) as f64);
                    for ch in 0..c {
                        let scale = gv[ch] * inv_std[ch];
                        // With batch statistics the mean and variance depend on x too.
                        let (mean_g, mean_gx) = if *batch_stats {
                            (dbeta[ch] / m, dgamma[ch] / m)
                        } else {
                            (F::zero(), F::zero())
                        };
                        for i in 0..n {
                            let off = (i * c + ch) * hw;
                            for j in off..off + hw {
                                gx[j] = scale * (g[j] - mean_g - xhat[j] * mean_gx);
                            }
                        }
                    }
                    self.accumulate_vec(grads, *x, gx);
                }
                self.accumulate_vec(grads, *gamma, dgamma);
                self.accumulate_vec(grads, *beta, dbeta);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![F::zero(); self.value(*x).len()];
                for (&src, &d) in argmax.iter().zip(g) {
                    gx[src] += d;
                }
                self.accumulate_vec(grads, *x, gx);
            }
            Op::L2Normalize { x, norms } => {
                let (n, d) = out.dims2().expect("rank 2");
                let y = out.data();
                let mut gx = vec![F::zero(); n * d];
                for (i, &norm) in norms.iter().enumerate().take(n) {
                    let r = i * d..(i + 1) * d;
                    let dot: F = y[r.clone()].iter().zip(&g[r.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in r {
                        gx[j] = (g[j] - y[j] * dot) / norm;
                    }
                }
                self.accumulate_vec(grads, *x, gx);
            }
            Op::GatherRows { x, rows } => {
                let src = self.value(*x);
                let row_len: usize = src.shape()[1..].iter().product();
                let mut gx = vec![F::zero(); src.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..row_len {
                        gx[r * row_len + j] += g[k * row_len + j];
                    }
                }
                self.accumulate_vec(grads, *x, gx);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let s = g[0] / F::of(n as f64);
                let mut gl: Vec<F> = probs.iter().map(|&p| p * s).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * c + l] -= s;
                }
                self.accumulate_vec(grads, *logits, gl);
            }
            Op::TripletMargin {
                a,
                p,
                n,
                margin,
                d_ap,
                d_an,
            } => {
                let (rows, d) = self.value(*a).dims2().expect("rank 2");
                let (av, pv, nv) = (self.value(*a).data(), self.value(*p).data(), self.value(*n).data());
                let s = g[0] / F::of(rows as f64);
                let mut ga = vec![F::zero(); rows * d];
                let mut gp = vec![F::zero(); rows * d];
                let mut gn = vec![F::zero(); rows * d];
                for i in 0..rows {
                    if d_ap[i] - d_an[i] + *margin <= F::zero() {
                        continue;
                    }
                    for j in i * d..(i + 1) * d {
                        if d_ap[i] > F::zero() {
                            let u = (av[j] - pv[j]) / d_ap[i] * s;
                            ga[j] += u;
                            gp[j] -= u;
                        }
                        if d_an[i] > F::zero() {
                            let u = (av[j] - nv[j]) / d_an[i] * s;
                            ga[j] -= u;
                            gn[j] += u;
                        }
                    }
                }
                self.accumulate_vec(grads, *a, ga);
                self.accumulate_vec(grads, *p, gp);
                self.accumulate_vec(grads, *n, gn);
            }
        }
    }
}
