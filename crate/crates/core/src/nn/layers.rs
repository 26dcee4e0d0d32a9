use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{BatchStats, Graph, NormMode, Var};
use super::params::ParamStore;
use super::tensor::Tensor;

/// How batch normalization and dropout behave during one forward pass.
pub struct ForwardCtx {
    pub batch_stats: bool,
    /// Dropout is active iff an RNG is present.
    pub dropout_rng: Option<ChaCha8Rng>,
    pub keep: f64,
    /// Batch statistics observed by each norm layer, for running-stat updates.
    pub observed: Vec<(Norm, BatchStats)>,
}

impl ForwardCtx {
    pub fn new(batch_stats: bool, dropout_rng: Option<ChaCha8Rng>, keep: f64) -> Self {
        ForwardCtx {
            batch_stats,
            dropout_rng,
            keep,
            observed: Vec::new(),
        }
    }

    /// Fold the observed batch statistics into the running buffers.
    pub fn apply_running_stats(&mut self, store: &mut ParamStore, momentum: f64) {
        for (norm, stats) in self.observed.drain(..) {
            for (id, fresh) in [(norm.running_mean, &stats.mean), (norm.running_var, &stats.var)] {
                let buf = store.get_mut(id).data_mut();
                for (r, f) in buf.iter_mut().zip(fresh) {
                    *r = ((1.0 - momentum) * *r + momentum * f) as f32 as f64;
                }
            }
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Convolution or transposed convolution with square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        transposed: bool,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = if transposed {
            vec![in_channels, out_channels, kernel, kernel]
        } else {
            vec![out_channels, in_channels, kernel, kernel]
        };
        let weight = store.add_normal(format!("{name}.weight"), shape, init_std, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]), true));
        Conv {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            transposed,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(self.weight, store.get(self.weight).clone());
        let b = self.bias.map(|b| g.param(b, store.get(b).clone()));
        if self.transposed {
            g.conv_transpose2d(x, w, b, self.stride, self.pad)
        } else {
            g.conv2d(x, w, b, self.stride, self.pad)
        }
    }
}

/// Batch normalization with learnable affine parameters and running buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub channels: usize,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(vec![channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(vec![channels], 1.0), false),
            channels,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Var {
        let gamma = g.param(self.gamma, store.get(self.gamma).clone());
        let beta = g.param(self.beta, store.get(self.beta).clone());
        let mode = if ctx.batch_stats {
            NormMode::Batch
        } else {
            NormMode::Running {
                mean: store.get(self.running_mean).data(),
                var: store.get(self.running_var).data(),
            }
        };
        let (y, stats) = g.batch_norm(x, gamma, beta, mode);
        if let Some(stats) = stats {
            ctx.observed.push((*self, stats));
        }
        y
    }
}

/// Apply inverted dropout if the context carries an RNG.
pub fn dropout(g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Var {
    let keep = ctx.keep;
    let Some(rng) = ctx.dropout_rng.as_mut() else {
        return x;
    };
    if keep >= 1.0 {
        return x;
    }
    let n = g.value(x).len();
    let scale = 1.0 / keep;
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    g.dropout(x, mask)
}

/// Activation applied at the end of a block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Leaky(f64),
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Leaky(s) => g.leaky_relu(x, s),
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// Convolution, optional batch norm, optional dropout, activation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Block {
    pub conv: Conv,
    pub norm: Option<Norm>,
    pub dropout: bool,
    pub activation: Activation,
}

impl Block {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Var {
        let mut h = self.conv.forward(g, store, x);
        if let Some(norm) = &self.norm {
            h = norm.forward(g, store, h, ctx);
        }
        if self.dropout {
            h = dropout(g, h, ctx);
        }
        self.activation.apply(g, h)
    }

    /// Append the slots (parameters and buffers) this block uses.
    pub fn collect_ids(&self, out: &mut Vec<usize>) {
        out.push(self.conv.weight);
        out.extend(self.conv.bias);
        if let Some(n) = &self.norm {
            out.extend([n.gamma, n.beta, n.running_mean, n.running_var]);
        }
    }
}
