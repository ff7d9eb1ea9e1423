//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! The op set is deliberately narrow: exactly what the detector, the
//! discriminators and the adaptation losses need, with the detection-specific
//! pieces (ROI max pooling, gathered losses, pair concatenation) fused into
//! single nodes.

use super::params::ParamSet;
use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Half-open feature-cell ranges `[r0, r1) x [c0, c1)` on a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRange {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

/// Identifies a parameter tensor: which set it came from and its slot there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub set: u32,
    pub index: usize,
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize, cols: Vec<Vec<f64>> },
    Relu { x: Var },
    Linear { x: Var, w: Var, b: Var },
    RoiPool { x: Var, argmax: Vec<usize> },
    PairConcat { a: Var, b: Var, pairs: Vec<(usize, usize)> },
    ConcatRows { parts: Vec<Var> },
    SelectRows { x: Var, rows: Vec<usize> },
    GlobalAvgPool { x: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
    SigmoidBce { logits: Var, idx: Vec<usize>, targets: Vec<f64>, weights: Vec<f64> },
    SoftmaxCe { logits: Var, rows: Vec<usize>, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    SmoothL1 { pred: Var, idx: Vec<usize>, targets: Vec<f64>, weights: Vec<f64>, beta: f64 },
    MaskedSqDiff { x: Var, reference: Vec<f64>, mask: Vec<bool>, norm: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamKey>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node, produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients but is not tied to a parameter set.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, key: ParamKey, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(key);
        v
    }

    /// Binds every tensor of `set` into the graph. With `tag = None` the
    /// values enter as constants and receive no gradient.
    pub fn bind(&mut self, set: &ParamSet, tag: Option<u32>) -> Vec<Var> {
        set.tensors()
            .iter()
            .enumerate()
            .map(|(index, t)| match tag {
                Some(set) => self.param(ParamKey { set, index }, t.clone()),
                None => self.constant(t.clone()),
            })
            .collect()
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    // ---------------------------------------------------------------- ops

    /// 2-D convolution, square kernel. `x`: `[N, C, H, W]`, `w`: `[O, C, k, k]`, `b`: `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCkk, got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let kk = c * k * k;
        let p = ho * wo;
        let requires = self.rg(&[x, w, b]);
        let keep_cols = self.nodes[w.0].requires_grad;
        let mut out = vec![0.0; n * o * p];
        let mut cols_all = Vec::new();
        let mut cols = vec![0.0; kk * p];
        {
            let xv = &self.nodes[x.0].value.data;
            let wv = &self.nodes[w.0].value.data;
            let bv = &self.nodes[b.0].value.data;
            for i in 0..n {
                im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, k, stride, pad, ho, wo, &mut cols);
                let dst = &mut out[i * o * p..(i + 1) * o * p];
                for (oc, chunk) in dst.chunks_mut(p).enumerate() {
                    chunk.fill(bv[oc]);
                }
                gemm(o, kk, p, wv, false, &cols, false, dst, 1.0);
                if keep_cols {
                    cols_all.push(cols.clone());
                }
            }
        }
        self.push(
            Tensor::new(vec![n, o, ho, wo], out),
            Op::Conv2d { x, w, b, stride, pad, cols: cols_all },
            requires,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|&a| if a > 0.0 || a.is_nan() { a } else { 0.0 }).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    /// `x` viewed as `[n, in]` (trailing dims flattened), `w`: `[out, in]`, `b`: `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (n, din) = (xv.rows(), xv.row_len());
        let dout = wv.shape[0];
        assert_eq!(wv.shape[1], din, "linear: input width {din} vs weight {:?}", wv.shape);
        let bv = &self.nodes[b.0].value.data;
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(bv);
        }
        gemm(n, din, dout, &xv.data, false, &wv.data, true, &mut out, 1.0);
        let rg = self.rg(&[x, w, b]);
        self.push(Tensor::new(vec![n, dout], out), Op::Linear { x, w, b }, rg)
    }

    /// Classic ROI max pooling over a single-image map `[1, C, H, W]` (or `[C, H, W]`).
    /// Each range is split into `bins_h x bins_w` integer bins; a range smaller
    /// than the bin grid replicates cells. Output `[R, C, bins_h, bins_w]`.
    pub fn roi_pool(&mut self, x: Var, rois: &[CellRange], bins_h: usize, bins_w: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (c, h, w) = match xs.len() {
            4 => {
                assert_eq!(xs[0], 1, "roi_pool expects a single image");
                (xs[1], xs[2], xs[3])
            }
            3 => (xs[0], xs[1], xs[2]),
            _ => panic!("roi_pool: bad input shape {xs:?}"),
        };
        let xv = &self.nodes[x.0].value.data;
        let per_roi = c * bins_h * bins_w;
        let mut out = vec![0.0; rois.len() * per_roi];
        let mut argmax = vec![0usize; rois.len() * per_roi];
        for (ri, roi) in rois.iter().enumerate() {
            assert!(roi.r0 < roi.r1 && roi.r1 <= h && roi.c0 < roi.c1 && roi.c1 <= w, "roi {roi:?} outside {h}x{w}");
            let rh = roi.r1 - roi.r0;
            let rw = roi.c1 - roi.c0;
            for ch in 0..c {
                let plane = ch * h * w;
                for by in 0..bins_h {
                    let ys = roi.r0 + by * rh / bins_h;
                    let ye = roi.r0 + ((by + 1) * rh).div_ceil(bins_h);
                    for bx in 0..bins_w {
                        let xs0 = roi.c0 + bx * rw / bins_w;
                        let xe = roi.c0 + ((bx + 1) * rw).div_ceil(bins_w);
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = plane + ys * w + xs0;
                        for yy in ys..ye {
                            for xx in xs0..xe {
                                let idx = plane + yy * w + xx;
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_i = idx;
                                }
                            }
                        }
                        let o = ri * per_roi + (ch * bins_h + by) * bins_w + bx;
                        out[o] = best;
                        argmax[o] = best_i;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![rois.len(), c, bins_h, bins_w], out), Op::RoiPool { x, argmax }, rg)
    }

    /// Row `k` of the output is row `pairs[k].0` of `a` followed by row
    /// `pairs[k].1` of `b`; for `[n, C, ...]` inputs this is channel concatenation.
    pub fn pair_concat(&mut self, a: Var, b: Var, pairs: &[(usize, usize)]) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape[1..], bv.shape[1..], "pair_concat: feature shapes differ");
        let d = av.row_len();
        let mut out = Vec::with_capacity(pairs.len() * 2 * d);
        for &(i, j) in pairs {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(j));
        }
        let mut shape = av.shape.clone();
        shape[0] = pairs.len();
        if shape.len() >= 2 {
            shape[1] *= 2;
        } else {
            shape.push(2);
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out), Op::PairConcat { a, b, pairs: pairs.to_vec() }, rg)
    }

    /// Stacks along the leading axis. All parts share trailing dims.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.shape[1..], tail[..], "concat_rows: trailing shapes differ");
            rows += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        self.push(Tensor::new(shape, data), Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(rows.len() * xv.row_len());
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let mut shape = xv.shape.clone();
        shape[0] = rows.len();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, data), Op::SelectRows { x, rows: rows.to_vec() }, rg)
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c) = (xv.shape[0], xv.shape[1]);
        let hw: usize = xv.shape[2..].iter().product();
        let data = xv.data.chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n, c], data), Op::GlobalAvgPool { x }, rg)
    }

    /// `sum_i coef_i * v_i` over single-element tensors; empty sums to 0.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, c)| c * self.nodes[v.0].value.item()).sum();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push(Tensor::scalar(total), Op::WeightedSum { terms: terms.to_vec() }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.weighted_sum(&[(a, 1.0), (b, 1.0)])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.weighted_sum(&[(a, c)])
    }

    /// `sum_i w_i * BCE(sigmoid(z[idx_i]), t_i)` over flat indices of `logits`.
    pub fn sigmoid_bce(&mut self, logits: Var, idx: &[usize], targets: &[f64], weights: &[f64]) -> Var {
        assert!(idx.len() == targets.len() && idx.len() == weights.len());
        let z = &self.nodes[logits.0].value.data;
        let total = idx
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&i, &t), &w)| w * (z[i].max(0.0) - z[i] * t + (-z[i].abs()).exp().ln_1p()))
            .sum();
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total),
            Op::SigmoidBce { logits, idx: idx.to_vec(), targets: targets.to_vec(), weights: weights.to_vec() },
            rg,
        )
    }

    /// `sum_r w_r * -log softmax(z[row_r])[target_r]` over a `[n, K]` logit matrix.
    pub fn softmax_ce(&mut self, logits: Var, rows: &[usize], targets: &[usize], weights: &[f64]) -> Var {
        assert!(rows.len() == targets.len() && rows.len() == weights.len());
        let zv = &self.nodes[logits.0].value;
        let k = zv.row_len();
        let mut probs = Vec::with_capacity(rows.len() * k);
        let mut total = 0.0;
        for ((&r, &t), &w) in rows.iter().zip(targets).zip(weights) {
            assert!(t < k, "softmax_ce target {t} outside {k} classes");
            let z = zv.row(r);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            let lse = m + s.ln();
            total += w * (lse - z[t]);
            probs.extend(z.iter().map(|v| (v - lse).exp()));
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total),
            Op::SoftmaxCe {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `sum_i w_i * smoothL1_beta(pred[idx_i] - t_i)`.
    pub fn smooth_l1(&mut self, pred: Var, idx: &[usize], targets: &[f64], weights: &[f64], beta: f64) -> Var {
        assert!(idx.len() == targets.len() && idx.len() == weights.len());
        let p = &self.nodes[pred.0].value.data;
        let total = idx
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&i, &t), &w)| {
                let d = (p[i] - t).abs();
                w * if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta }
            })
            .sum();
        let rg = self.rg(&[pred]);
        self.push(
            Tensor::scalar(total),
            Op::SmoothL1 { pred, idx: idx.to_vec(), targets: targets.to_vec(), weights: weights.to_vec(), beta },
            rg,
        )
    }

    /// `(1/norm) * sum over channels and masked locations of (x - reference)^2`.
    /// `x` is `[.., C, H, W]` with a single image; `mask` has `H * W` entries.
    pub fn masked_sq_diff(&mut self, x: Var, reference: &[f64], mask: &[bool], norm: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.data.len(), reference.len(), "masked_sq_diff: reference size mismatch");
        let hw = mask.len();
        assert_eq!(xv.data.len() % hw, 0, "masked_sq_diff: mask does not tile the map");
        let total = if norm > 0.0 {
            xv.data
                .iter()
                .zip(reference)
                .enumerate()
                .filter(|(i, _)| mask[i % hw])
                .map(|(_, (a, b))| (a - b) * (a - b))
                .sum::<f64>()
                / norm
        } else {
            0.0
        };
        let rg = self.rg(&[x]);
        self.push(
            Tensor::scalar(total),
            Op::MaskedSqDiff { x, reference: reference.to_vec(), mask: mask.to_vec(), norm },
            rg,
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward needs a scalar loss");
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.backprop_node(node, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&self.nodes[v.0].value.shape));
        f(&mut slot.data);
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = &gy.data;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let xs = &self.nodes[x.0].value.shape;
                let ws = &self.nodes[w.0].value.shape;
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let (ho, wo) = (node.value.shape[2], node.value.shape[3]);
                let p = ho * wo;
                let kk = c * k * k;
                self.acc(grads, *b, |db| {
                    for i in 0..n {
                        for (oc, chunk) in g[i * o * p..(i + 1) * o * p].chunks(p).enumerate() {
                            db[oc] += chunk.iter().sum::<f64>();
                        }
                    }
                });
                if self.nodes[w.0].requires_grad {
                    self.acc(grads, *w, |dw| {
                        for i in 0..n {
                            gemm(o, p, kk, &g[i * o * p..(i + 1) * o * p], false, &cols[i], true, dw, 1.0);
                        }
                    });
                }
                if self.nodes[x.0].requires_grad {
                    let wv = &self.nodes[w.0].value.data;
                    let mut dcols = vec![0.0; kk * p];
                    self.acc(grads, *x, |dx| {
                        for i in 0..n {
                            gemm(kk, o, p, wv, true, &g[i * o * p..(i + 1) * o * p], false, &mut dcols, 0.0);
                            col2im(&dcols, c, h, wd, k, *stride, *pad, ho, wo, &mut dx[i * c * h * wd..(i + 1) * c * h * wd]);
                        }
                    });
                }
            }
            Op::Relu { x } => {
                let y = &node.value.data;
                self.acc(grads, *x, |dx| {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        if yv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (n, din) = (xv.rows(), xv.row_len());
                let dout = wv.shape[0];
                self.acc(grads, *b, |db| {
                    for row in g.chunks(dout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                });
                self.acc(grads, *w, |dw| gemm(dout, n, din, g, true, &xv.data, false, dw, 1.0));
                self.acc(grads, *x, |dx| gemm(n, dout, din, g, false, &wv.data, false, dx, 1.0));
            }
            Op::RoiPool { x, argmax } => {
                self.acc(grads, *x, |dx| {
                    for (&i, &gv) in argmax.iter().zip(g) {
                        dx[i] += gv;
                    }
                });
            }
            Op::PairConcat { a, b, pairs } => {
                let d = self.nodes[a.0].value.row_len();
                self.acc(grads, *a, |da| {
                    for (k, &(i, _)) in pairs.iter().enumerate() {
                        for (t, v) in da[i * d..(i + 1) * d].iter_mut().zip(&g[2 * k * d..(2 * k + 1) * d]) {
                            *t += v;
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for (k, &(_, j)) in pairs.iter().enumerate() {
                        for (t, v) in db[j * d..(j + 1) * d].iter_mut().zip(&g[(2 * k + 1) * d..(2 * k + 2) * d]) {
                            *t += v;
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    self.acc(grads, *p, |dp| {
                        for (t, v) in dp.iter_mut().zip(&g[off..off + len]) {
                            *t += v;
                        }
                    });
                    off += len;
                }
            }
            Op::SelectRows { x, rows } => {
                let d = self.nodes[x.0].value.row_len();
                self.acc(grads, *x, |dx| {
                    for (k, &r) in rows.iter().enumerate() {
                        for (t, v) in dx[r * d..(r + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]) {
                            *t += v;
                        }
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let hw: usize = self.nodes[x.0].value.shape[2..].iter().product();
                self.acc(grads, *x, |dx| {
                    for (chunk, &gv) in dx.chunks_mut(hw).zip(g) {
                        for t in chunk {
                            *t += gv / hw as f64;
                        }
                    }
                });
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    self.acc(grads, v, |dv| dv[0] += c * g[0]);
                }
            }
            Op::SigmoidBce { logits, idx, targets, weights } => {
                let z = &self.nodes[logits.0].value.data;
                self.acc(grads, *logits, |dz| {
                    for ((&i, &t), &w) in idx.iter().zip(targets).zip(weights) {
                        let s = 1.0 / (1.0 + (-z[i]).exp());
                        dz[i] += g[0] * w * (s - t);
                    }
                });
            }
            Op::SoftmaxCe { logits, rows, targets, weights, probs } => {
                let k = self.nodes[logits.0].value.row_len();
                self.acc(grads, *logits, |dz| {
                    for (n, ((&r, &t), &w)) in rows.iter().zip(targets).zip(weights).enumerate() {
                        let p = &probs[n * k..(n + 1) * k];
                        let row = &mut dz[r * k..(r + 1) * k];
                        for (j, d) in row.iter_mut().enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            *d += g[0] * w * (p[j] - onehot);
                        }
                    }
                });
            }
            Op::SmoothL1 { pred, idx, targets, weights, beta } => {
                let p = &self.nodes[pred.0].value.data;
                self.acc(grads, *pred, |dp| {
                    for ((&i, &t), &w) in idx.iter().zip(targets).zip(weights) {
                        let d = p[i] - t;
                        let grad = if d.abs() < *beta { d / beta } else { d.signum() };
                        dp[i] += g[0] * w * grad;
                    }
                });
            }
            Op::MaskedSqDiff { x, reference, mask, norm } => {
                if *norm <= 0.0 {
                    return;
                }
                let xv = &self.nodes[x.0].value.data;
                let hw = mask.len();
                self.acc(grads, *x, |dx| {
                    for (i, d) in dx.iter_mut().enumerate() {
                        if mask[i % hw] {
                            *d += g[0] * 2.0 * (xv[i] - reference[i]) / norm;
                        }
                    }
                });
            }
        }
    }

    /// Sums gradients of every node bound from parameter set `set` into
    /// per-slot tensors (slots never reached stay `None`).
    pub fn param_grads(&self, grads: &Gradients, set: u32, slots: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..slots).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(key), Some(gt)) = (node.param, grads.grads[i].as_ref()) {
                if key.set == set {
                    match &mut out[key.index] {
                        Some(acc) => acc.add_assign(gt),
                        slot => *slot = Some(gt.clone()),
                    }
                }
            }
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, cols: &mut [f64]) {
    let p = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[ch * h * w + iy as usize * w..ch * h * w + (iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, dx: &mut [f64]) {
    let p = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
