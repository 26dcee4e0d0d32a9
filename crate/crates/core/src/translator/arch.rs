use rand::Rng;

use super::TranslatorConfig;
use crate::nn::{Activation, Block, Conv, ForwardCtx, Graph, Norm, ParamStore, Tensor, Var};

/// Channels of encoder level `level` (1-based).
pub(crate) fn encoder_channels(base: usize, level: usize) -> usize {
    base * (1usize << (level - 1).min(3))
}

/// U-Net generator. `decoder[0]` consumes the bottleneck; `head` maps the
/// outermost concatenation to three tanh channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorArch {
    pub encoder: Vec<Block>,
    pub decoder: Vec<Block>,
    pub head: Conv,
}

impl GeneratorArch {
    pub(crate) fn new(store: &mut ParamStore, cfg: &TranslatorConfig, rng: &mut impl Rng) -> Self {
        let depth = cfg.encoder_depth;
        let ch = |l| encoder_channels(cfg.base_channels, l);
        let enc_dropout = !cfg.dropout_decoder_only;
        let mut encoder = Vec::with_capacity(depth);
        for level in 1..=depth {
            let c_in = if level == 1 { 1 } else { ch(level - 1) };
            // The 1x1 bottleneck carries a single value per channel, so it has
            // no batch norm (and therefore keeps its bias).
            let plain = level == 1 || level == depth;
            let name = format!("gen.enc{level}");
            let conv = Conv::new(store, &name, c_in, ch(level), 4, 2, 1, plain, false, cfg.init_std, rng);
            let norm = (!plain).then(|| Norm::new(store, &format!("{name}.bn"), ch(level)));
            encoder.push(Block {
                conv,
                norm,
                dropout: level > 1 && enc_dropout,
                activation: Activation::Leaky(cfg.leaky_slope),
            });
        }
        let mut decoder = Vec::with_capacity(depth - 1);
        for level in (1..depth).rev() {
            let c_in = if level == depth - 1 { ch(depth) } else { 2 * ch(level + 1) };
            let name = format!("gen.dec{level}");
            let conv = Conv::new(store, &name, c_in, ch(level), 4, 2, 1, false, true, cfg.init_std, rng);
            let norm = Norm::new(store, &format!("{name}.bn"), ch(level));
            decoder.push(Block {
                conv,
                norm: Some(norm),
                dropout: true,
                activation: Activation::Relu,
            });
        }
        let head = Conv::new(store, "gen.head", 2 * ch(1), 3, 4, 2, 1, true, true, cfg.init_std, rng);
        GeneratorArch { encoder, decoder, head }
    }

    pub fn param_ids(&self) -> Vec<usize> {
        let mut ids = Vec::new();
        for b in self.encoder.iter().chain(&self.decoder) {
            b.collect_ids(&mut ids);
        }
        ids.push(self.head.weight);
        ids.extend(self.head.bias);
        ids
    }

    /// `x` is `[batch, 1, side, side]`; returns `[batch, 3, side, side]` in `[−1, 1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx,
        ablate_inner_skip: bool,
    ) -> Var {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for b in &self.encoder {
            h = b.forward(g, store, h, ctx);
            skips.push(h);
        }
        let depth = skips.len();
        let mut u = skips[depth - 1];
        for (j, b) in self.decoder.iter().enumerate() {
            u = b.forward(g, store, u, ctx);
            let mut skip = skips[depth - 2 - j];
            if j == 0 && ablate_inner_skip {
                skip = g.input(Tensor::zeros(g.value(skip).shape().to_vec()));
            }
            u = g.concat(u, skip);
        }
        let y = self.head.forward(g, store, u);
        g.tanh(y)
    }
}

/// Patch critic over the 4-channel (mask, image) concatenation. The last
/// block emits logits.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticArch {
    pub layers: Vec<Block>,
}

impl CriticArch {
    pub(crate) fn new(store: &mut ParamStore, cfg: &TranslatorConfig, rng: &mut impl Rng) -> Self {
        let b = cfg.base_channels;
        let plan = [(4, b, 2), (b, 2 * b, 2), (2 * b, 4 * b, 2), (4 * b, 8 * b, 1), (8 * b, 1, 1)];
        let last = plan.len() - 1;
        let layers = plan
            .iter()
            .enumerate()
            .map(|(i, &(c_in, c_out, stride))| {
                let plain = i == 0 || i == last;
                let name = format!("critic.c{}", i + 1);
                let conv = Conv::new(store, &name, c_in, c_out, 4, stride, 1, plain, false, cfg.init_std, rng);
                let norm = (!plain).then(|| Norm::new(store, &format!("{name}.bn"), c_out));
                Block {
                    conv,
                    norm,
                    dropout: false,
                    activation: if i == last { Activation::Identity } else { Activation::Leaky(cfg.leaky_slope) },
                }
            })
            .collect();
        CriticArch { layers }
    }

    pub fn param_ids(&self) -> Vec<usize> {
        let mut ids = Vec::new();
        for b in &self.layers {
            b.collect_ids(&mut ids);
        }
        ids
    }

    /// `(kernel, stride)` per layer.
    pub fn descriptor(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|b| (b.conv.kernel, b.conv.stride)).collect()
    }

    /// Score-map side for a square input of `side` pixels (0 if it collapses).
    pub fn output_side(&self, side: usize) -> usize {
        self.layers.iter().fold(side, |s, b| {
            let c = b.conv;
            (s + 2 * c.pad).checked_sub(c.kernel).map_or(0, |v| v / c.stride + 1)
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Var {
        self.layers.iter().fold(x, |h, b| b.forward(g, store, h, ctx))
    }
}
