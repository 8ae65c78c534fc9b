//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`] walks
//! the nodes in exact reverse order of recording and accumulates adjoints, so a
//! value consumed by several ops receives the sum of their contributions.

use serde::{Deserialize, Serialize};

use crate::conv::{self, ColumnBuffer, ConvGeometry};
use crate::error::{Error, Result};
use crate::layers::SigmaPattern;
use crate::mask::{self, GaussianMask, MaskKind, MaskParams};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Max,
    Avg,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    GlobalPool {
        input: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Concat {
        a: Var,
        b: Var,
    },
    WeightedSum {
        input: Var,
        coeffs: Tensor,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    MaskWeight {
        weight: Var,
        sigma: Var,
        mask: GaussianMask,
    },
    SigmaHead {
        raw: Var,
        pattern: SigmaPattern,
    },
    DynamicConv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        sigmas: Var,
        masks: Vec<GaussianMask>,
        stride: usize,
        padding: usize,
    },
    ShortcutPad {
        input: Var,
        stride: usize,
        offset: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Adjoints produced by one backward pass.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    visited: Vec<Var>,
}

impl Gradients {
    /// Adjoint of a leaf created with [`Tape::variable`]. `None` when the leaf
    /// does not influence the seeded output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.leaves.get_mut(v.0).and_then(Option::take)
    }

    /// Nodes that carried an adjoint, in the order the backward pass visited them.
    pub fn visit_order(&self) -> &[Var] {
        &self.visited
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose adjoint is reported by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = conv::conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), stride, padding)?;
        let rg = self.needs(&[Some(input), Some(weight), bias]);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, stride, padding }, rg))
    }

    /// Per-channel max or mean over spatial positions: `N x C x H x W -> N x C`.
    pub fn global_pool(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::new();
        for plane in x.data().chunks(hw) {
            match mode {
                PoolMode::Max => {
                    let mut best = 0;
                    for (i, &v) in plane.iter().enumerate() {
                        if v > plane[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                    out.push(plane[best]);
                }
                PoolMode::Avg => out.push(plane.iter().sum::<f64>() / hw as f64),
            }
        }
        let out = Tensor::new(&[n, c], out)?;
        let rg = self.needs(&[Some(input)]);
        Ok(self.push(out, Op::GlobalPool { input, mode, argmax }, rg))
    }

    /// `y = x W^T + b` for `x: N x F`, `W: G x F`, `b: G`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let (n, f) = x.dims2()?;
        let (g, wf) = w.dims2()?;
        if wf != f {
            return Err(Error::Shape(format!("dense: input has {f} features but weight expects {wf}")));
        }
        let b = bias.map(|b| self.value(b));
        if let Some(b) = b {
            if b.shape() != [g] {
                return Err(Error::Shape(format!("dense: bias shape {:?} != [{g}]", b.shape())));
            }
        }
        let mut out = vec![0.0; n * g];
        for (row, dst) in x.data().chunks(f).zip(out.chunks_mut(g)) {
            for (j, d) in dst.iter_mut().enumerate() {
                let wr = &w.data()[j * f..(j + 1) * f];
                *d = row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>() + b.map_or(0.0, |b| b.data()[j]);
            }
        }
        let out = Tensor::new(&[n, g], out)?;
        let rg = self.needs(&[Some(input), Some(weight), bias]);
        Ok(self.push(out, Op::Dense { input, weight, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(0.0));
        let rg = self.needs(&[Some(input)]);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.needs(&[Some(a), Some(b)]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Multiply by a fixed constant.
    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).scale(factor);
        let rg = self.needs(&[Some(input)]);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    /// Concatenate two `N x F` tensors along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, fa) = self.value(a).dims2()?;
        let (nb, fb) = self.value(b).dims2()?;
        if na != nb {
            return Err(Error::Shape(format!("concat: batch {na} != {nb}")));
        }
        let mut out = Vec::with_capacity(na * (fa + fb));
        for (ra, rb) in self.value(a).data().chunks(fa).zip(self.value(b).data().chunks(fb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let out = Tensor::new(&[na, fa + fb], out)?;
        let rg = self.needs(&[Some(a), Some(b)]);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Scalar `sum_i coeffs_i * x_i`.
    pub fn weighted_sum(&mut self, input: Var, coeffs: Tensor) -> Result<Var> {
        self.value(input).expect_same_shape(&coeffs)?;
        let s = self.value(input).data().iter().zip(coeffs.data()).map(|(a, b)| a * b).sum();
        let rg = self.needs(&[Some(input)]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { input, coeffs }, rg))
    }

    /// Mean softmax cross-entropy of `N x L` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, l) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for a batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= l) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {l} classes")));
        }
        let mut probs = Vec::with_capacity(n * l);
        let mut loss = 0.0;
        for (row, &y) in self.value(logits).data().chunks(l).zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let log_z = z.ln();
            loss -= row[y] - m - log_z;
            probs.extend(row.iter().map(|v| (v - m - log_z).exp()));
        }
        let probs = Tensor::new(&[n, l], probs)?;
        let rg = self.needs(&[Some(logits)]);
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss / n as f64), op, rg))
    }

    /// `W * M` with one `K x K` mask broadcast over every `(o, c)` slice of a
    /// `O x C x K x K` weight. `sigma` holds one value (circular) or two
    /// (elliptic: horizontal, vertical).
    pub fn mask_weight(&mut self, weight: Var, sigma: Var, kind: MaskKind) -> Result<Var> {
        let (_, _, k, k2) = self.value(weight).dims4()?;
        if k != k2 {
            return Err(Error::Shape(format!("mask_weight: kernel must be square, got {k}x{k2}")));
        }
        let s = self.value(sigma).data();
        let params = match (kind, s) {
            (MaskKind::Circular, &[s]) => MaskParams::circular(s, k),
            (MaskKind::Elliptic, &[s1, s2]) => MaskParams::elliptic(s1, s2, k),
            _ => {
                return Err(Error::Shape(format!(
                    "mask_weight: {kind:?} mask needs {} sigma value(s), got {}",
                    if kind == MaskKind::Circular { 1 } else { 2 },
                    s.len()
                )))
            }
        };
        let mask = GaussianMask::new(params)?;
        let out = apply_mask(self.value(weight), &mask);
        let rg = self.needs(&[Some(weight), Some(sigma)]);
        Ok(self.push(out, Op::MaskWeight { weight, sigma, mask }, rg))
    }

    /// Map raw predictions (`N x 1` or `N x 2`) to positive `(sigma1, sigma2)` pairs.
    pub fn sigma_head(&mut self, raw: Var, pattern: SigmaPattern) -> Result<Var> {
        let (n, k) = self.value(raw).dims2()?;
        if k != pattern.arity() {
            return Err(Error::Shape(format!(
                "sigma head {pattern:?} expects {} raw outputs, got {k}",
                pattern.arity()
            )));
        }
        let mut out = Vec::with_capacity(2 * n);
        for r in self.value(raw).data().chunks(k) {
            let (s1, s2) = pattern.map(r);
            out.push(s1);
            out.push(s2);
        }
        let out = Tensor::new(&[n, 2], out)?;
        let rg = self.needs(&[Some(raw)]);
        Ok(self.push(out, Op::SigmaHead { raw, pattern }, rg))
    }

    /// Convolution where sample `n` uses the kernel `W * mask(sigmas[n])`.
    pub fn dynamic_conv(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        sigmas: Var,
        kind: MaskKind,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let g = ConvGeometry::new(self.value(input).shape(), self.value(weight).shape(), stride, padding)?;
        let (sn, sk) = self.value(sigmas).dims2()?;
        if sn != g.batch || sk != 2 {
            return Err(Error::Shape(format!("dynamic_conv: sigmas must be {} x 2, got {sn} x {sk}", g.batch)));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [g.out_channels] {
                return Err(Error::Shape("dynamic_conv: bias shape mismatch".into()));
            }
        }
        let masks = self
            .value(sigmas)
            .data()
            .chunks(2)
            .map(|s| GaussianMask::new(mask_params(kind, s[0], s[1], g.kernel)))
            .collect::<Result<Vec<_>>>()?;
        let (x, w) = (self.value(input), self.value(weight));
        let si = g.in_channels * g.height * g.width;
        let so = g.out_channels * g.positions();
        let mut out = vec![0.0; g.batch * so];
        let mut cols = ColumnBuffer::new(&g);
        for (n, m) in masks.iter().enumerate() {
            let wn = apply_mask(w, m);
            conv::forward_sample(
                &x.data()[n * si..(n + 1) * si],
                wn.data(),
                bias.map(|b| self.value(b).data()),
                &g,
                &mut cols,
                &mut out[n * so..(n + 1) * so],
            );
        }
        let out = Tensor::new(&g.output_shape(), out)?;
        let rg = self.needs(&[Some(input), Some(weight), bias, Some(sigmas)]);
        let op = Op::DynamicConv { input, weight, bias, sigmas, masks, stride, padding };
        Ok(self.push(out, op, rg))
    }

    /// Parameter-free shortcut: spatial subsampling by `stride` and symmetric
    /// zero-padding of channels up to `out_channels`.
    pub fn shortcut_pad(&mut self, input: Var, stride: usize, out_channels: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if stride == 0 || out_channels < c {
            return Err(Error::Shape(format!(
                "shortcut_pad: cannot map {c} channels to {out_channels} with stride {stride}"
            )));
        }
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let offset = (out_channels - c) / 2;
        let x = self.value(input).data();
        let mut out = vec![0.0; n * out_channels * oh * ow];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        out[((b * out_channels + ch + offset) * oh + y) * ow + xx] =
                            x[((b * c + ch) * h + y * stride) * w + xx * stride];
                    }
                }
            }
        }
        let out = Tensor::new(&[n, out_channels, oh, ow], out)?;
        let rg = self.needs(&[Some(input)]);
        Ok(self.push(out, Op::ShortcutPad { input, stride, offset }, rg))
    }

    /// Backpropagate from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        self.backward_from(output, Tensor::full(self.value(output).shape(), 1.0))
    }

    /// Backpropagate an explicit adjoint `seed` placed on `output`.
    pub fn backward_from(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.value(output).expect_same_shape(&seed)?;
        let len = output.0 + 1;
        let mut adj: Vec<Option<Tensor>> = (0..len).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor>> = (0..len).map(|_| None).collect();
        let mut visited = Vec::new();
        adj[output.0] = Some(seed);
        for i in (0..len).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            visited.push(Var(i));
            if let Op::Leaf = node.op {
                leaves[i] = Some(g);
                continue;
            }
            for (v, contribution) in self.node_backward(node, &g)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { leaves, visited })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { input, weight, bias, stride, padding } => {
                let grads = conv::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    g,
                    stride,
                    padding,
                    self.rg(input),
                    self.rg(weight),
                )?;
                if let Some(gx) = grads.input {
                    out.push((input, gx));
                }
                if let Some(gw) = grads.weight {
                    out.push((weight, gw));
                }
                if let Some(b) = bias {
                    out.push((b, grads.bias));
                }
            }
            Op::GlobalPool { input, mode, argmax } => {
                let x = self.value(*input);
                let (_, _, h, w) = x.dims4()?;
                let hw = h * w;
                let mut gx = vec![0.0; x.numel()];
                for (plane, (i, &gv)) in gx.chunks_mut(hw).zip(g.data().iter().enumerate()) {
                    match mode {
                        PoolMode::Max => plane[argmax[i]] = gv,
                        PoolMode::Avg => plane.fill(gv / hw as f64),
                    }
                }
                out.push((*input, Tensor::new(x.shape(), gx)?));
            }
            &Op::Dense { input, weight, bias } => {
                let (x, w) = (self.value(input), self.value(weight));
                let (n, f) = x.dims2()?;
                let (gn, _) = w.dims2()?;
                if self.rg(input) {
                    let mut gx = vec![0.0; n * f];
                    for (gr, dst) in g.data().chunks(gn).zip(gx.chunks_mut(f)) {
                        for (j, &gv) in gr.iter().enumerate() {
                            for (d, wv) in dst.iter_mut().zip(&w.data()[j * f..(j + 1) * f]) {
                                *d += gv * wv;
                            }
                        }
                    }
                    out.push((input, Tensor::new(&[n, f], gx)?));
                }
                if self.rg(weight) {
                    let mut gw = vec![0.0; gn * f];
                    for (gr, xr) in g.data().chunks(gn).zip(x.data().chunks(f)) {
                        for (j, &gv) in gr.iter().enumerate() {
                            for (d, xv) in gw[j * f..(j + 1) * f].iter_mut().zip(xr) {
                                *d += gv * xv;
                            }
                        }
                    }
                    out.push((weight, Tensor::new(&[gn, f], gw)?));
                }
                if let Some(b) = bias {
                    let mut gb = vec![0.0; gn];
                    for gr in g.data().chunks(gn) {
                        gb.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                    out.push((b, Tensor::new(&[gn], gb)?));
                }
            }
            &Op::Relu { input } => {
                let gx = self.value(input).zip_map(g, |x, gv| if x > 0.0 { gv } else { 0.0 })?;
                out.push((input, gx));
            }
            &Op::Add { a, b } => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::Scale { input, factor } => out.push((input, g.scale(factor))),
            &Op::Concat { a, b } => {
                let (n, fa) = self.value(a).dims2()?;
                let (_, fb) = self.value(b).dims2()?;
                let mut ga = Vec::with_capacity(n * fa);
                let mut gb = Vec::with_capacity(n * fb);
                for row in g.data().chunks(fa + fb) {
                    ga.extend_from_slice(&row[..fa]);
                    gb.extend_from_slice(&row[fa..]);
                }
                out.push((a, Tensor::new(&[n, fa], ga)?));
                out.push((b, Tensor::new(&[n, fb], gb)?));
            }
            Op::WeightedSum { input, coeffs } => out.push((*input, coeffs.scale(g.data()[0]))),
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let (n, l) = probs.dims2()?;
                let s = g.data()[0] / n as f64;
                let mut gl = probs.data().to_vec();
                for (row, &y) in gl.chunks_mut(l).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= s);
                }
                out.push((*logits, Tensor::new(&[n, l], gl)?));
            }
            Op::MaskWeight { weight, sigma, mask } => {
                let kk = mask.values().len();
                if self.rg(*weight) {
                    out.push((*weight, apply_mask(g, mask)));
                }
                if self.rg(*sigma) {
                    let w = self.value(*weight);
                    let mg = mask::mask_grad_with(mask);
                    let reduce = |dm: &[f64]| -> f64 {
                        g.data()
                            .chunks(kk)
                            .zip(w.data().chunks(kk))
                            .map(|(gs, ws)| gs.iter().zip(ws).zip(dm).map(|((a, b), c)| a * b * c).sum::<f64>())
                            .sum()
                    };
                    let mut gs = vec![reduce(&mg.d_sigma1)];
                    if let Some(d2) = &mg.d_sigma2 {
                        gs.push(reduce(d2));
                    }
                    out.push((*sigma, Tensor::new(self.value(*sigma).shape(), gs)?));
                }
            }
            &Op::SigmaHead { raw, pattern } => {
                let r = self.value(raw);
                let k = pattern.arity();
                let mut gr = Vec::with_capacity(r.numel());
                for (rv, gv) in r.data().chunks(k).zip(g.data().chunks(2)) {
                    gr.extend(pattern.backward(rv, gv[0], gv[1]));
                }
                out.push((raw, Tensor::new(r.shape(), gr)?));
            }
            Op::DynamicConv { input, weight, bias, sigmas, masks, stride, padding } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let geo = ConvGeometry::new(x.shape(), w.shape(), *stride, *padding)?;
                let si = geo.in_channels * geo.height * geo.width;
                let so = geo.out_channels * geo.positions();
                let kk = geo.kernel * geo.kernel;
                let (need_x, need_w, need_s) = (self.rg(*input), self.rg(*weight), self.rg(*sigmas));
                let mut gx = need_x.then(|| vec![0.0; x.numel()]);
                let mut gw = vec![0.0; w.numel()];
                let mut gs = vec![0.0; 2 * geo.batch];
                let mut gb = vec![0.0; geo.out_channels];
                let mut gwn = vec![0.0; w.numel()];
                let mut cols = ColumnBuffer::new(&geo);
                for (n, m) in masks.iter().enumerate() {
                    let go = &g.data()[n * so..(n + 1) * so];
                    for (o, b) in gb.iter_mut().enumerate() {
                        *b += go[o * geo.positions()..(o + 1) * geo.positions()].iter().sum::<f64>();
                    }
                    let wn = apply_mask(w, m);
                    gwn.fill(0.0);
                    conv::backward_sample(
                        &x.data()[n * si..(n + 1) * si],
                        wn.data(),
                        go,
                        &geo,
                        &mut cols,
                        (need_w || need_s).then_some(gwn.as_mut_slice()),
                        gx.as_mut().map(|v| &mut v[n * si..(n + 1) * si]),
                    );
                    if need_w {
                        for (d, (gv, mv)) in gw.iter_mut().zip(gwn.iter().zip(m.values().iter().cycle())) {
                            *d += gv * mv;
                        }
                    }
                    if need_s {
                        let mg = mask::mask_grad_with(m);
                        let reduce = |dm: &[f64]| -> f64 {
                            gwn.chunks(kk)
                                .zip(w.data().chunks(kk))
                                .map(|(gs, ws)| gs.iter().zip(ws).zip(dm).map(|((a, b), c)| a * b * c).sum::<f64>())
                                .sum()
                        };
                        match m.params().kind {
                            MaskKind::Circular => gs[2 * n] = reduce(&mg.d_sigma1),
                            MaskKind::Elliptic => {
                                gs[2 * n] = reduce(&mg.d_sigma1);
                                gs[2 * n + 1] = reduce(mg.d_sigma2.as_deref().unwrap_or_default());
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    out.push((*input, Tensor::new(x.shape(), gx)?));
                }
                if need_w {
                    out.push((*weight, Tensor::new(w.shape(), gw)?));
                }
                if need_s {
                    out.push((*sigmas, Tensor::new(&[geo.batch, 2], gs)?));
                }
                if let Some(b) = bias {
                    out.push((*b, Tensor::new(&[geo.out_channels], gb)?));
                }
            }
            &Op::ShortcutPad { input, stride, offset } => {
                let x = self.value(input);
                let (n, c, h, w) = x.dims4()?;
                let (_, oc, oh, ow) = g.dims4()?;
                let mut gx = vec![0.0; x.numel()];
                for b in 0..n {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                gx[((b * c + ch) * h + y * stride) * w + xx * stride] =
                                    g.data()[((b * oc + ch + offset) * oh + y) * ow + xx];
                            }
                        }
                    }
                }
                out.push((input, Tensor::new(x.shape(), gx)?));
            }
        }
        Ok(out)
    }
}

pub(crate) fn mask_params(kind: MaskKind, sigma1: f64, sigma2: f64, k: usize) -> MaskParams {
    match kind {
        MaskKind::Circular => MaskParams::circular(sigma1, k),
        MaskKind::Elliptic => MaskParams::elliptic(sigma1, sigma2, k),
    }
}

/// Multiply every trailing `K x K` slice of `weight` by `mask`.
pub(crate) fn apply_mask(weight: &Tensor, mask: &GaussianMask) -> Tensor {
    let m = mask.values();
    let mut out = weight.clone();
    for slice in out.data_mut().chunks_mut(m.len()) {
        slice.iter_mut().zip(m).for_each(|(v, mv)| *v *= mv);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_hand_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mx = t.global_pool(x, PoolMode::Max).unwrap();
        let av = t.global_pool(x, PoolMode::Avg).unwrap();
        assert_eq!(t.value(mx).data(), &[4.0]);
        assert_eq!(t.value(av).data(), &[2.5]);

        let c = t.constant(Tensor::full(&[2, 3, 4, 5], -1.25));
        let mx = t.global_pool(c, PoolMode::Max).unwrap();
        let av = t.global_pool(c, PoolMode::Avg).unwrap();
        assert!(t.value(mx).data().iter().all(|&v| v == -1.25));
        assert!(t.value(av).data().iter().all(|&v| v == -1.25));

        let s = t.constant(Tensor::new(&[1, 2, 1, 1], vec![5.0, -3.0]).unwrap());
        let mx = t.global_pool(s, PoolMode::Max).unwrap();
        assert_eq!(t.value(mx).data(), &[5.0, -3.0]);
    }

    #[test]
    fn max_pool_routes_to_first_argmax() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::new(&[1, 1, 2, 2], vec![4.0, 1.0, 4.0, 4.0]).unwrap());
        let y = t.global_pool(x, PoolMode::Max).unwrap();
        let s = t.weighted_sum(y, Tensor::new(&[1, 1], vec![1.0]).unwrap()).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_hand_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = t.constant(Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap());
        let b = t.constant(Tensor::new(&[1], vec![5.0]).unwrap());
        let y = t.dense(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[16.0]);
        let y0 = t.dense(x, w, None).unwrap();
        assert_eq!(t.value(y0).data(), &[11.0]);

        let xi = t.constant(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let eye = t.constant(eye);
        let yi = t.dense(xi, eye, None).unwrap();
        assert_eq!(t.value(yi), t.value(xi));
        let bad = t.constant(Tensor::zeros(&[2, 4]));
        assert!(t.dense(xi, bad, None).is_err());
    }

    #[test]
    fn relu_forward_and_gate() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = t.weighted_sum(y, Tensor::ones(&[3])).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut t = Tape::new();
        let x = t.variable(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
        let y = t.relu(x);
        let g = t.backward_from(y, Tensor::ones(&[2])).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::full(&[3, 10], 0.7));
        let loss = t.softmax_cross_entropy(l, &[0, 4, 9]).unwrap();
        assert!((t.value(loss).data()[0] - 10f64.ln()).abs() < 1e-12);

        let l = t.constant(Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap());
        let loss = t.softmax_cross_entropy(l, &[0]).unwrap();
        let v = t.value(loss).data()[0];
        assert!(v.is_finite() && v.abs() < 1e-12);

        let mut t = Tape::new();
        let l = t.variable(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        let loss = t.softmax_cross_entropy(l, &[1]).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(l).unwrap().data(), &[0.5, -0.5]);
        assert!(t.softmax_cross_entropy(l, &[2]).is_err());
    }

    #[test]
    fn backward_visits_in_reverse_order_and_accumulates() {
        // y = relu(x) + 3x  -> dy/dx = 1[x>0] + 3
        let mut t = Tape::new();
        let x = t.variable(Tensor::new(&[2], vec![-2.0, 5.0]).unwrap());
        let r = t.relu(x);
        let s = t.scale(x, 3.0);
        let y = t.add(r, s).unwrap();
        let total = t.weighted_sum(y, Tensor::ones(&[2])).unwrap();
        let g = t.backward(total).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        let order: Vec<usize> = g.visit_order().iter().map(|v| v.index()).collect();
        assert_eq!(order, vec![total.index(), y.index(), s.index(), r.index(), x.index()]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(&[2]));
        let w = t.variable(Tensor::ones(&[2]));
        let y = t.add(x, w).unwrap();
        let s = t.weighted_sum(y, Tensor::ones(&[2])).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn shortcut_pad_layout() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.shortcut_pad(x, 2, 3).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 3, 1, 1]);
        assert_eq!(t.value(y).data(), &[0.0, 1.0, 0.0]);
    }
}
