//! The 4-level volumetric encoder-decoder predictor.
//!
//! Contracting path: per level, two Conv3x3-BatchNorm-ReLU units followed by
//! 2x max pooling; channel widths double per level from `base_width`. A
//! bridge block at the bottleneck keeps the deepest width. Expanding path:
//! 2x transposed convolution, concatenation of the matching encoder features,
//! and two Conv-BN-ReLU units per level. A final 1x1x1 projection yields
//! either a two-channel softmax (foreground probability) or a single linear
//! channel (signed distance regression).

pub mod checkpoint;
mod layers;

pub use checkpoint::Checkpoint;
pub use layers::Param;

use ndarray::{Array3, Array5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PredictionMode;
use crate::volume::Volume;
use layers::{
    concat_channels, maxpool_backward, maxpool_forward, relu_backward, relu_forward,
    split_channels, BatchNorm, BnCache, Conv1, Conv3, PoolCache, UpConv2,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutMode {
    #[serde(rename = "two_class_softmax")]
    TwoClassSoftmax,
    #[serde(rename = "sdt_scalar")]
    SdtScalar,
}

impl OutMode {
    pub fn prediction_mode(&self) -> PredictionMode {
        match self {
            OutMode::TwoClassSoftmax => PredictionMode::Probability,
            OutMode::SdtScalar => PredictionMode::Sdt,
        }
    }

    pub fn from_prediction_mode(mode: PredictionMode) -> Self {
        match mode {
            PredictionMode::Probability => OutMode::TwoClassSoftmax,
            PredictionMode::Sdt => OutMode::SdtScalar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_width: usize,
    pub in_channels: usize,
    pub out_mode: OutMode,
    pub bn_momentum: f32,
    pub bn_eps: f32,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 4,
            base_width: 32,
            in_channels: 1,
            out_mode: OutMode::TwoClassSoftmax,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl UNetConfig {
    pub fn downsample_factor(&self) -> usize {
        1 << self.levels
    }

    pub fn validate_input_shape(&self, shape: [usize; 3]) -> Result<()> {
        let f = self.downsample_factor();
        for (a, &d) in shape.iter().enumerate() {
            if d % f != 0 || d == 0 {
                return Err(Error::InvalidArgument(format!(
                    "input dim {a} = {d} is not divisible by 2^levels = {f}"
                )));
            }
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn head_channels(&self) -> usize {
        match self.out_mode {
            OutMode::TwoClassSoftmax => 2,
            OutMode::SdtScalar => 1,
        }
    }

    /// Closed-form learnable parameter count for this configuration.
    pub fn parameter_count(&self) -> usize {
        let conv3 = |ci: usize, co: usize| co * ci * 27 + co;
        let bn = |c: usize| 2 * c;
        let block = |ci: usize, co: usize| conv3(ci, co) + bn(co) + conv3(co, co) + bn(co);
        let up = |ci: usize, co: usize| 8 * ci * co + co;
        let mut total = 0;
        // encoder
        let mut in_c = self.in_channels;
        for l in 0..self.levels {
            total += block(in_c, self.width(l));
            in_c = self.width(l);
        }
        // bridge
        let deep = self.width(self.levels - 1);
        total += block(deep, deep);
        // decoder
        for l in (0..self.levels).rev() {
            let upper = if l == self.levels - 1 { deep } else { self.width(l + 1) };
            total += up(upper, self.width(l));
            total += block(2 * self.width(l), self.width(l));
        }
        // head
        total += self.head_channels() * self.base_width + self.head_channels();
        total
    }
}

/// Two Conv3x3 -> BatchNorm -> ReLU units.
#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: Conv3,
    bn1: BatchNorm,
    conv2: Conv3,
    bn2: BatchNorm,
}

struct ConvBlockCache {
    x_in: Array5<f32>,
    bn1: BnCache,
    act1: Array5<f32>,
    bn2: BnCache,
    act2: Array5<f32>,
}

impl ConvBlock {
    fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        cfg: &UNetConfig,
        rng: &mut impl rand::Rng,
    ) -> Self {
        ConvBlock {
            conv1: Conv3::new(&format!("{name}.conv1"), in_c, out_c, rng),
            bn1: BatchNorm::new(&format!("{name}.bn1"), out_c, cfg.bn_momentum, cfg.bn_eps),
            conv2: Conv3::new(&format!("{name}.conv2"), out_c, out_c, rng),
            bn2: BatchNorm::new(&format!("{name}.bn2"), out_c, cfg.bn_momentum, cfg.bn_eps),
        }
    }

    fn forward_train(&mut self, x: Array5<f32>) -> (Array5<f32>, ConvBlockCache) {
        let c1 = self.conv1.forward(&x);
        let (b1, bn1) = self.bn1.forward_train(&c1);
        let act1 = relu_forward(&b1);
        let c2 = self.conv2.forward(&act1);
        let (b2, bn2) = self.bn2.forward_train(&c2);
        let act2 = relu_forward(&b2);
        (
            act2.clone(),
            ConvBlockCache {
                x_in: x,
                bn1,
                act1,
                bn2,
                act2,
            },
        )
    }

    fn forward_eval(&self, x: &Array5<f32>) -> Array5<f32> {
        let c1 = self.conv1.forward(x);
        let b1 = self.bn1.forward_eval(&c1);
        let act1 = relu_forward(&b1);
        let c2 = self.conv2.forward(&act1);
        let b2 = self.bn2.forward_eval(&c2);
        relu_forward(&b2)
    }

    fn backward(&mut self, cache: &ConvBlockCache, grad_out: &Array5<f32>) -> Array5<f32> {
        let g = relu_backward(&cache.act2, grad_out);
        let g = self.bn2.backward(&cache.bn2, &g);
        let g = self.conv2.backward(&cache.act1, &g);
        let g = relu_backward(&cache.act1, &g);
        let g = self.bn1.backward(&cache.bn1, &g);
        self.conv1.backward(&cache.x_in, &g)
    }

    fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        f(&mut self.conv1.weight);
        f(&mut self.conv1.bias);
        f(&mut self.bn1.gamma);
        f(&mut self.bn1.beta);
        f(&mut self.conv2.weight);
        f(&mut self.conv2.bias);
        f(&mut self.bn2.gamma);
        f(&mut self.bn2.beta);
    }

    fn visit_buffers(&mut self, f: &mut impl FnMut(&str, &mut Vec<f32>)) {
        f("bn1.running_mean", &mut self.bn1.running_mean);
        f("bn1.running_var", &mut self.bn1.running_var);
        f("bn2.running_mean", &mut self.bn2.running_mean);
        f("bn2.running_var", &mut self.bn2.running_var);
    }
}

/// The full encoder-decoder network.
pub struct UNet {
    pub config: UNetConfig,
    enc: Vec<ConvBlock>,
    bridge: ConvBlock,
    ups: Vec<UpConv2>, // index l upsamples into level l
    dec: Vec<ConvBlock>,
    head: Conv1,
}

/// Activation cache of one training-mode forward pass.
pub struct ForwardCache {
    enc: Vec<ConvBlockCache>,
    pools: Vec<PoolCache>,
    pool_in_dims: Vec<(usize, usize, usize, usize, usize)>,
    bridge: ConvBlockCache,
    up_inputs: Vec<Array5<f32>>,
    dec: Vec<ConvBlockCache>,
    head_in: Array5<f32>,
    probs: Option<Array5<f32>>,
}

impl UNet {
    /// Build a network with fan-in-scaled uniform initialization from the
    /// given seed.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.levels == 0 || config.base_width == 0 || config.in_channels == 0 {
            return Err(Error::Config(
                "network levels, base_width, and in_channels must be positive".to_string(),
            ));
        }
        let mut rng = crate::rng::stream(seed, "unet-init", &[]);
        let mut enc = Vec::new();
        let mut in_c = config.in_channels;
        for l in 0..config.levels {
            enc.push(ConvBlock::new(
                &format!("enc{l}"),
                in_c,
                config.width(l),
                &config,
                &mut rng,
            ));
            in_c = config.width(l);
        }
        let deep = config.width(config.levels - 1);
        let bridge = ConvBlock::new("bridge", deep, deep, &config, &mut rng);
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for l in 0..config.levels {
            let upper = if l == config.levels - 1 { deep } else { config.width(l + 1) };
            ups.push(UpConv2::new(&format!("up{l}"), upper, config.width(l), &mut rng));
            dec.push(ConvBlock::new(
                &format!("dec{l}"),
                2 * config.width(l),
                config.width(l),
                &config,
                &mut rng,
            ));
        }
        let head = Conv1::new(
            "head",
            config.base_width,
            config.head_channels(),
            &mut rng,
        );
        Ok(UNet {
            config,
            enc,
            bridge,
            ups,
            dec,
            head,
        })
    }

    pub fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        for b in &mut self.enc {
            b.visit_params(f);
        }
        self.bridge.visit_params(f);
        for u in &mut self.ups {
            f(&mut u.weight);
            f(&mut u.bias);
        }
        for b in &mut self.dec {
            b.visit_params(f);
        }
        f(&mut self.head.weight);
        f(&mut self.head.bias);
    }

    fn visit_buffers(&mut self, f: &mut impl FnMut(String, &mut Vec<f32>)) {
        for (l, b) in self.enc.iter_mut().enumerate() {
            b.visit_buffers(&mut |n, v| f(format!("enc{l}.{n}"), v));
        }
        self.bridge.visit_buffers(&mut |n, v| f(format!("bridge.{n}"), v));
        for (l, b) in self.dec.iter_mut().enumerate() {
            b.visit_buffers(&mut |n, v| f(format!("dec{l}.{n}"), v));
        }
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut Param::zero_grad);
    }

    fn softmax_fg(logits: &Array5<f32>) -> Array5<f32> {
        let (n, c, d, h, w) = logits.dim();
        debug_assert_eq!(c, 2);
        let mut probs = Array5::zeros((n, 1, d, h, w));
        for i in 0..n {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let z0 = logits[[i, 0, z, y, x]];
                        let z1 = logits[[i, 1, z, y, x]];
                        // p_fg = sigmoid(z1 - z0), numerically stable
                        let t = z1 - z0;
                        let p = if t >= 0.0 {
                            1.0 / (1.0 + (-t).exp())
                        } else {
                            let e = t.exp();
                            e / (1.0 + e)
                        };
                        probs[[i, 0, z, y, x]] = p;
                    }
                }
            }
        }
        probs
    }

    fn check_input(&self, x: &Array5<f32>) -> Result<()> {
        let (_, c, d, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(Error::InvalidArgument(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        self.config.validate_input_shape([d, h, w])
    }

    /// Training-mode forward pass (batch statistics, caches kept).
    /// Output: `[n, 1, d, h, w]` foreground probability or SDT field.
    pub fn forward_train(&mut self, x: Array5<f32>) -> Result<(Array5<f32>, ForwardCache)> {
        self.check_input(&x)?;
        let mut skips = Vec::new();
        let mut enc_caches = Vec::new();
        let mut pools = Vec::new();
        let mut pool_in_dims = Vec::new();
        let mut cur = x;
        for block in &mut self.enc {
            let (out, cache) = block.forward_train(cur);
            pool_in_dims.push(out.dim());
            let (pooled, pc) = maxpool_forward(&out);
            skips.push(cache.act2.clone());
            enc_caches.push(cache);
            pools.push(pc);
            cur = pooled;
        }
        let (mut cur, bridge_cache) = self.bridge.forward_train(cur);
        let mut up_inputs = Vec::new();
        let mut dec_caches = Vec::new();
        for l in (0..self.config.levels).rev() {
            up_inputs.push(cur.clone());
            let upped = self.ups[l].forward(&cur);
            let merged = concat_channels(&upped, &skips[l]);
            let (out, cache) = self.dec[l].forward_train(merged);
            dec_caches.push(cache);
            cur = out;
        }
        let logits = self.head.forward(&cur);
        let (output, probs) = match self.config.out_mode {
            OutMode::TwoClassSoftmax => {
                let p = Self::softmax_fg(&logits);
                (p.clone(), Some(p))
            }
            OutMode::SdtScalar => (logits, None),
        };
        Ok((
            output.clone(),
            ForwardCache {
                enc: enc_caches,
                pools,
                pool_in_dims,
                bridge: bridge_cache,
                up_inputs,
                dec: dec_caches,
                head_in: cur,
                probs,
            },
        ))
    }

    /// Evaluation-mode forward pass (frozen normalization statistics).
    pub fn forward_eval(&self, x: &Array5<f32>) -> Result<Array5<f32>> {
        self.check_input(x)?;
        let mut skips = Vec::new();
        let mut cur = x.clone();
        for block in &self.enc {
            let out = block.forward_eval(&cur);
            let (pooled, _) = maxpool_forward(&out);
            skips.push(out);
            cur = pooled;
        }
        cur = self.bridge.forward_eval(&cur);
        for l in (0..self.config.levels).rev() {
            let upped = self.ups[l].forward(&cur);
            let merged = concat_channels(&upped, &skips[l]);
            cur = self.dec[l].forward_eval(&merged);
        }
        let logits = self.head.forward(&cur);
        Ok(match self.config.out_mode {
            OutMode::TwoClassSoftmax => Self::softmax_fg(&logits),
            OutMode::SdtScalar => logits,
        })
    }

    /// Backward pass from the gradient of the loss with respect to the
    /// network output (probability or SDT field). Accumulates parameter
    /// gradients.
    pub fn backward(&mut self, cache: &ForwardCache, grad_output: &Array5<f32>) {
        // head activation backward
        let grad_logits = match self.config.out_mode {
            OutMode::TwoClassSoftmax => {
                let probs = cache.probs.as_ref().expect("probability cache");
                let (n, _, d, h, w) = probs.dim();
                let mut g = Array5::zeros((n, 2, d, h, w));
                for i in 0..n {
                    for z in 0..d {
                        for y in 0..h {
                            for x in 0..w {
                                let p = probs[[i, 0, z, y, x]];
                                let dp = grad_output[[i, 0, z, y, x]];
                                let dt = dp * p * (1.0 - p); // d p / d (z1 - z0)
                                g[[i, 1, z, y, x]] = dt;
                                g[[i, 0, z, y, x]] = -dt;
                            }
                        }
                    }
                }
                g
            }
            OutMode::SdtScalar => grad_output.clone(),
        };
        let mut g = self.head.backward(&cache.head_in, &grad_logits);
        // Decoder ran l = levels-1 .. 0 in the forward pass, so unwind it
        // l = 0 .. levels-1, collecting the skip gradients on the way down.
        let levels = self.config.levels;
        let mut skip_grads: Vec<Option<Array5<f32>>> = (0..levels).map(|_| None).collect();
        for l in 0..levels {
            let rev_idx = levels - 1 - l;
            let g_merged = self.dec[l].backward(&cache.dec[rev_idx], &g);
            let (g_upped, g_skip) = split_channels(&g_merged, self.ups[l].out_c);
            skip_grads[l] = Some(g_skip);
            g = self.ups[l].backward(&cache.up_inputs[rev_idx], &g_upped);
        }
        // g is now the gradient at the bridge output.
        g = self.bridge.backward(&cache.bridge, &g);
        // Encoder backward, deepest level first; each block output receives
        // the unpooled path plus its skip gradient.
        for l in (0..levels).rev() {
            let g_pool_in = maxpool_backward(&cache.pools[l], &g, cache.pool_in_dims[l]);
            let g_enc_out = g_pool_in + skip_grads[l].take().expect("skip grad collected");
            g = self.enc[l].backward(&cache.enc[l], &g_enc_out);
        }
        // g is now the gradient with respect to the input volume; discarded
    }
}

/// Run the network on a single preprocessed volume, returning the raw
/// output field (probability or SDT) as f64.
pub fn forward_volume(net: &UNet, volume: &Volume) -> Result<Array3<f64>> {
    let [d, h, w] = volume.shape();
    let mut x = Array5::zeros((1, 1, d, h, w));
    for ((i, j, k), v) in volume.data.indexed_iter() {
        x[[0, 0, i, j, k]] = *v;
    }
    let out = net.forward_eval(&x)?;
    Ok(Array3::from_shape_fn((d, h, w), |(i, j, k)| {
        out[[0, 0, i, j, k]] as f64
    }))
}
