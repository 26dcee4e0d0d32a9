//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs for the backward sweep. [`Graph::backward`] walks the tape once in
//! reverse and returns gradients for every node that depends on a parameter.

use super::tensor::{col2im, gemm, im2col, Geometry, Tensor};
use crate::exec;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Batch-normalization flavour for one forward call.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with externally supplied running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics observed during a `NormMode::Batch` forward.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (divisor M−1, or M when M = 1).
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

enum Op {
    Input,
    Param(usize),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geo: Geometry,
        cols: Vec<Vec<f64>>,
    },
    ConvTranspose {
        x: usize,
        w: usize,
        b: Option<usize>,
        geo: Geometry,
    },
    Norm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    Tanh {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Mean {
        x: usize,
    },
    AbsDiffMean {
        a: usize,
        b: usize,
    },
    LogClamped {
        x: usize,
        eps: f64,
    },
    OneMinus {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    BceLogitsMean {
        x: usize,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients summed per parameter slot; `None` where a parameter did not
    /// influence the root.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; n_params];
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                match &mut out[pid] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant leaf (no gradient is propagated into it).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A trainable leaf bound to parameter slot `id`.
    pub fn param(&mut self, id: usize, value: Tensor) -> Var {
        self.push(value, Op::Param(id), true)
    }

    /// A copy of `v`'s value that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    /// 2-D convolution. `w` has shape `[c_out, c_in, k, k]`, `b` shape `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], c, "conv input channels mismatch");
        assert_eq!(ws[2], ws[3]);
        let (c_out, k) = (ws[0], ws[2]);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv kernel larger than padded input");
        let geo = Geometry::new(c, h, wd, k, stride, pad);
        let (ckk, p) = (geo.col_rows(), geo.col_cols());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bias = b.map(|b| self.value(b).data().to_vec());
        let per_sample: Vec<(Vec<f64>, Vec<f64>)> = exec::map_range(n, |i| {
            let cols = im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &geo);
            let mut out = vec![0.0; c_out * p];
            gemm(c_out, ckk, p, wv, (ckk as isize, 1), &cols, (p as isize, 1), &mut out, false);
            if let Some(bias) = &bias {
                for (o, row) in out.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bias[o]);
                }
            }
            (cols, out)
        });
        let mut data = Vec::with_capacity(n * c_out * p);
        let mut cols = Vec::with_capacity(n);
        for (col, out) in per_sample {
            data.extend_from_slice(&out);
            cols.push(col);
        }
        let value = Tensor::new(vec![n, c_out, geo.out_h, geo.out_w], data);
        let ng = self.ng(x.0) || self.ng(w.0) || b.is_some_and(|b| self.ng(b.0));
        self.push(
            value,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geo,
                cols,
            },
            ng,
        )
    }

    /// Transposed convolution (adjoint of [`Graph::conv2d`]). `w` has shape
    /// `[c_in, c_out, k, k]`; output side is `(side − 1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c_in, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[0], c_in, "transposed conv input channels mismatch");
        let (c_out, k) = (ws[1], ws[2]);
        let out_h = (h - 1) * stride + k - 2 * pad;
        let out_w = (wd - 1) * stride + k - 2 * pad;
        let geo = Geometry::new(c_out, out_h, out_w, k, stride, pad);
        debug_assert_eq!((geo.out_h, geo.out_w), (h, wd));
        let (cokk, hw) = (geo.col_rows(), h * wd);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bias = b.map(|b| self.value(b).data().to_vec());
        let per_sample: Vec<Vec<f64>> = exec::map_range(n, |i| {
            let mut cols = vec![0.0; cokk * hw];
            gemm(
                cokk,
                c_in,
                hw,
                wv,
                (1, cokk as isize),
                &xv[i * c_in * hw..(i + 1) * c_in * hw],
                (hw as isize, 1),
                &mut cols,
                false,
            );
            let mut out = col2im(&cols, &geo);
            if let Some(bias) = &bias {
                for (o, plane) in out.chunks_mut(out_h * out_w).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bias[o]);
                }
            }
            out
        });
        let value = Tensor::new(vec![n, c_out, out_h, out_w], per_sample.concat());
        let ng = self.ng(x.0) || self.ng(w.0) || b.is_some_and(|b| self.ng(b.0));
        self.push(
            value,
            Op::ConvTranspose {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geo,
            },
            ng,
        )
    }

    /// Per-channel batch normalization with affine `gamma`/`beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: NormMode<'_>) -> (Var, Option<BatchStats>) {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let m = (n * hw) as f64;
        let xv = self.value(x).data();
        let (mean, var_b, stats) = match mode {
            NormMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xv[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut ss = 0.0;
                    for i in 0..n {
                        ss += xv[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Running { mean, var } => (mean.to_vec(), var.to_vec(), None),
        };
        let inv_std: Vec<f64> = var_b.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    let xh = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out);
        let ng = self.ng(x.0) || self.ng(gamma.0) || self.ng(beta.0);
        let v = self.push(
            value,
            Op::Norm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch: stats.is_some(),
            },
            ng,
        );
        (v, stats)
    }

    /// Multiply by a precomputed (already keep-scaled) dropout mask.
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.len());
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data);
        let ng = self.ng(x.0);
        self.push(value, Op::Dropout { x: x.0, mask }, ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(x.0);
        self.push(value, Op::LeakyRelu { x: x.0, slope }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let ng = self.ng(x.0);
        self.push(value, Op::Tanh { x: x.0 }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let ng = self.ng(x.0);
        self.push(value, Op::Sigmoid { x: x.0 }, ng)
    }

    /// Concatenate two NCHW tensors along channels.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat shape mismatch");
        let hw = h * w;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            data.extend_from_slice(&av[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&bv[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], data);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, Op::Concat { a: a.0, b: b.0 }, ng)
    }

    /// 2×2 max pooling with stride 2 (ties go to the first element in scan order).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut data = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; data.len()];
        for plane in 0..n * c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = plane * h * w + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = plane * h * w + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    let o = plane * oh * ow + i * ow + j;
                    data[o] = xv[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], data);
        let ng = self.ng(x.0);
        self.push(value, Op::MaxPool { x: x.0, argmax }, ng)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.len() as f64);
        let ng = self.ng(x.0);
        self.push(value, Op::Mean { x: x.0 }, ng)
    }

    /// `mean(|a − b|)` as a scalar.
    pub fn abs_diff_mean(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).abs()).sum();
        let value = Tensor::scalar(s / av.len() as f64);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, Op::AbsDiffMean { a: a.0, b: b.0 }, ng)
    }

    /// `ln(clamp(x, eps, 1 − eps))` elementwise.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(eps, 1.0 - eps).ln());
        let ng = self.ng(x.0);
        self.push(value, Op::LogClamped { x: x.0, eps }, ng)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 - v);
        let ng = self.ng(x.0);
        self.push(value, Op::OneMinus { x: x.0 }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, Op::Add { a: a.0, b: b.0 }, ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let ng = self.ng(x.0);
        self.push(value, Op::Scale { x: x.0, factor }, ng)
    }

    /// Mean binary cross-entropy between `sigmoid(x)` and `target`, computed
    /// from logits.
    pub fn bce_with_logits_mean(&mut self, x: Var, target: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(target.len(), xv.len());
        let s: f64 = xv
            .data()
            .iter()
            .zip(&target)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(s / xv.len() as f64);
        let ng = self.ng(x.0);
        self.push(value, Op::BceLogitsMean { x: x.0, target }, ng)
    }

    /// Gradients of the scalar `root` with respect to every upstream node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut params = Vec::new();
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(pid) = node.op {
                params.push((idx, pid));
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        params.reverse();
        Gradients { grads, params }
    }

    fn backward_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let go = gout.data();
        let acc = |target: usize, g: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[target].needs_grad {
                return;
            }
            match &mut grads[target] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv { x, w, b, geo, cols } => {
                let (x, w) = (*x, *w);
                let xs = self.nodes[x].value.shape().to_vec();
                let ws = self.nodes[w].value.shape().to_vec();
                let (c_out, ckk, p) = (ws[0], geo.col_rows(), geo.col_cols());
                let n = xs[0];
                let want_x = self.ng(x);
                let want_w = self.ng(w);
                let wv = self.nodes[w].value.data();
                let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = exec::map_range(n, |i| {
                    let dout = &go[i * c_out * p..(i + 1) * c_out * p];
                    let dw = want_w.then(|| {
                        let mut dw = vec![0.0; c_out * ckk];
                        gemm(c_out, p, ckk, dout, (p as isize, 1), &cols[i], (1, p as isize), &mut dw, false);
                        dw
                    });
                    let dx = want_x.then(|| {
                        let mut dcols = vec![0.0; ckk * p];
                        gemm(ckk, c_out, p, wv, (1, ckk as isize), dout, (p as isize, 1), &mut dcols, false);
                        col2im(&dcols, geo)
                    });
                    (dw, dx)
                });
                let mut dw_total = want_w.then(|| vec![0.0; c_out * ckk]);
                let mut dx_total = want_x.then(|| Vec::with_capacity(xs.iter().product()));
                for (dw, dx) in per_sample {
                    if let (Some(t), Some(d)) = (dw_total.as_mut(), dw) {
                        t.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                    }
                    if let (Some(t), Some(d)) = (dx_total.as_mut(), dx) {
                        t.extend_from_slice(&d);
                    }
                }
                if let Some(d) = dw_total {
                    acc(w, Tensor::new(ws, d), grads);
                }
                if let Some(d) = dx_total {
                    acc(x, Tensor::new(xs, d), grads);
                }
                if let Some(b) = *b {
                    acc(b, Tensor::new(vec![c_out], channel_sums(go, n, c_out, p)), grads);
                }
            }
            Op::ConvTranspose { x, w, b, geo } => {
                let (x, w) = (*x, *w);
                let xs = self.nodes[x].value.shape().to_vec();
                let ws = self.nodes[w].value.shape().to_vec();
                let (n, c_in) = (xs[0], xs[1]);
                let hw = xs[2] * xs[3];
                let c_out = ws[1];
                let cokk = geo.col_rows();
                let out_plane = c_out * geo.height * geo.width;
                let want_x = self.ng(x);
                let want_w = self.ng(w);
                let wv = self.nodes[w].value.data();
                let xv = self.nodes[x].value.data();
                let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = exec::map_range(n, |i| {
                    let dcols = im2col(&go[i * out_plane..(i + 1) * out_plane], geo);
                    let dx = want_x.then(|| {
                        let mut dx = vec![0.0; c_in * hw];
                        gemm(c_in, cokk, hw, wv, (cokk as isize, 1), &dcols, (hw as isize, 1), &mut dx, false);
                        dx
                    });
                    let dw = want_w.then(|| {
                        let mut dw = vec![0.0; c_in * cokk];
                        let xi = &xv[i * c_in * hw..(i + 1) * c_in * hw];
                        gemm(c_in, hw, cokk, xi, (hw as isize, 1), &dcols, (1, hw as isize), &mut dw, false);
                        dw
                    });
                    (dw, dx)
                });
                let mut dw_total = want_w.then(|| vec![0.0; c_in * cokk]);
                let mut dx_total = want_x.then(|| Vec::with_capacity(n * c_in * hw));
                for (dw, dx) in per_sample {
                    if let (Some(t), Some(d)) = (dw_total.as_mut(), dw) {
                        t.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                    }
                    if let (Some(t), Some(d)) = (dx_total.as_mut(), dx) {
                        t.extend_from_slice(&d);
                    }
                }
                if let Some(d) = dw_total {
                    acc(w, Tensor::new(ws, d), grads);
                }
                if let Some(d) = dx_total {
                    acc(x, Tensor::new(xs, d), grads);
                }
                if let Some(b) = *b {
                    let plane = geo.height * geo.width;
                    acc(b, Tensor::new(vec![c_out], channel_sums(go, n, c_out, plane)), grads);
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let (n, c, h, w) = self.nodes[*x].value.dims4();
                let hw = h * w;
                let m = (n * hw) as f64;
                let g = self.nodes[*gamma].value.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * hw;
                        for j in off..off + hw {
                            dgamma[ch] += go[j] * xhat[j];
                            dbeta[ch] += go[j];
                        }
                    }
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; go.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * hw;
                            for j in off..off + hw {
                                dx[j] = if *batch {
                                    // dxhat = go·γ; dx = inv_std/M · (M·dxhat − Σdxhat − x̂·Σ(dxhat·x̂))
                                    g[ch] * inv_std[ch] / m * (m * go[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    g[ch] * inv_std[ch] * go[j]
                                };
                            }
                        }
                    }
                    acc(*x, Tensor::new(vec![n, c, h, w], dx), grads);
                }
                acc(*gamma, Tensor::new(vec![c], dgamma), grads);
                acc(*beta, Tensor::new(vec![c], dbeta), grads);
            }
            Op::Dropout { x, mask } => {
                let d = go.iter().zip(mask).map(|(a, m)| a * m).collect();
                acc(*x, Tensor::new(gout.shape().to_vec(), d), grads);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.nodes[*x].value.data();
                let d = go
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > 0.0 { *g } else { slope * g })
                    .collect();
                acc(*x, Tensor::new(gout.shape().to_vec(), d), grads);
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                let d = go.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                acc(*x, Tensor::new(gout.shape().to_vec(), d), grads);
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let d = go.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                acc(*x, Tensor::new(gout.shape().to_vec(), d), grads);
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.nodes[*a].value.dims4();
                let cb = self.nodes[*b].value.dims4().1;
                let hw = h * w;
                let ct = ca + cb;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for i in 0..n {
                    da.extend_from_slice(&go[i * ct * hw..(i * ct + ca) * hw]);
                    db.extend_from_slice(&go[(i * ct + ca) * hw..(i + 1) * ct * hw]);
                }
                acc(*a, Tensor::new(vec![n, ca, h, w], da), grads);
                acc(*b, Tensor::new(vec![n, cb, h, w], db), grads);
            }
            Op::MaxPool { x, argmax } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let mut d = vec![0.0; xs.iter().product()];
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += go[o];
                }
                acc(*x, Tensor::new(xs, d), grads);
            }
            Op::Mean { x } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let n = self.nodes[*x].value.len() as f64;
                acc(*x, Tensor::full(xs, go[0] / n), grads);
            }
            Op::AbsDiffMean { a, b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let scale = go[0] / av.len() as f64;
                let shape = self.nodes[*a].value.shape().to_vec();
                let da: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| scale * sign(x - y))
                    .collect();
                let db = da.iter().map(|v| -v).collect();
                acc(*a, Tensor::new(shape.clone(), da), grads);
                acc(*b, Tensor::new(shape, db), grads);
            }
            Op::LogClamped { x, eps } => {
                let xv = self.nodes[*x].value.data();
                let d = go
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v >= *eps && v <= 1.0 - eps { g / v } else { 0.0 })
                    .collect();
                acc(*x, Tensor::new(gout.shape().to_vec(), d), grads);
            }
            Op::OneMinus { x } => {
                acc(*x, gout.map(|g| -g), grads);
            }
            Op::Add { a, b } => {
                acc(*a, gout.clone(), grads);
                acc(*b, gout.clone(), grads);
            }
            Op::Scale { x, factor } => {
                acc(*x, gout.map(|g| g * factor), grads);
            }
            Op::BceLogitsMean { x, target } => {
                let xv = self.nodes[*x].value.data();
                let scale = go[0] / xv.len() as f64;
                let d = xv
                    .iter()
                    .zip(target)
                    .map(|(&z, &t)| scale * (sigmoid(z) - t))
                    .collect();
                acc(*x, Tensor::new(self.nodes[*x].value.shape().to_vec(), d), grads);
            }
        }
    }
}

fn channel_sums(go: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; c];
    for i in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            *acc += go[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().sum::<f64>();
        }
    }
    db
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
