//! Two-head encoder-decoder segmenter. The input is a 5-channel grid
//! (RGB scaled to [0, 1], the modal input mask, and the occlusion-boundary
//! mask); the output is a mask-probability grid through a sigmoid and a
//! strictly positive per-pixel uncertainty grid through a softplus.
//!
//! The network is a small U-shaped CNN: `depth` 2x downsamplings with
//! double 3x3 conv blocks, nearest-neighbor upsampling with skip
//! concatenation on the way back up, and a 1x1 two-channel head. All math
//! is plain `ndarray` with a hand-written backward pass, which keeps
//! training runs bit-reproducible for a fixed seed regardless of worker
//! count.

mod checkpoint;
pub(crate) mod layers;

use crate::mask::BinaryMask;
use image::RgbImage;
use layers::{
    concat_channels, maxpool2, maxpool2_backward, leaky_relu_backward_inplace, leaky_relu_inplace, sigmoid,
    softplus, split_channels, upsample2, upsample2_backward, Conv2d,
};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Channels fed to the network: R, G, B, modal input mask, boundary mask.
pub const INPUT_CHANNELS: usize = 5;

/// Lower bound applied to the uncertainty head output before it is used in
/// any division.
pub const UNCERTAINTY_FLOOR: f32 = 1e-6;

/// Assemble the network input: RGB scaled to [0, 1], then the modal input
/// mask, then the boundary mask, each as a {0, 1} channel.
pub fn pack_input(image: &RgbImage, modal: &BinaryMask, boundary: &BinaryMask) -> Array3<f32> {
    let (h, w) = modal.dims();
    assert_eq!(boundary.dims(), (h, w), "mask dimensions differ");
    assert_eq!(
        (image.height() as usize, image.width() as usize),
        (h, w),
        "image dimensions differ from mask dimensions"
    );
    let mut input = Array3::zeros((INPUT_CHANNELS, h, w));
    for r in 0..h {
        for c in 0..w {
            let px = image.get_pixel(c as u32, r as u32);
            for ch in 0..3 {
                input[[ch, r, c]] = px[ch] as f32 / 255.0;
            }
            input[[3, r, c]] = modal.get(r, c) as u8 as f32;
            input[[4, r, c]] = boundary.get(r, c) as u8 as f32;
        }
    }
    input
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match expected {expected:?}")]
    InputShape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side length of the square input grid. Must be divisible by 2^depth.
    pub input_size: usize,
    /// Channel count of the first encoder block; level i uses
    /// `base_channels << i`.
    pub base_channels: usize,
    /// Number of 2x downsamplings.
    pub depth: usize,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            base_channels: 16,
            depth: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth == 0 {
            return Err(ModelError::InvalidConfig("depth must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(ModelError::InvalidConfig(
                "base_channels must be at least 1".into(),
            ));
        }
        let stride = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "input_size {} must be a positive multiple of 2^depth = {}",
                self.input_size, stride
            )));
        }
        Ok(())
    }
}

/// Network output on one grid.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Mask probability in [0, 1].
    pub mask_prob: Array2<f32>,
    /// Per-pixel uncertainty, always >= `UNCERTAINTY_FLOOR`.
    pub uncertainty: Array2<f32>,
}

#[derive(Debug, Clone)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let mut y = self.a.forward(x);
        leaky_relu_inplace(&mut y);
        let mut z = self.b.forward(&y);
        leaky_relu_inplace(&mut z);
        z
    }

    fn forward_cached(&self, x: Array3<f32>) -> (Array3<f32>, DcCache) {
        let mut a_out = self.a.forward(&x);
        leaky_relu_inplace(&mut a_out);
        let mut b_out = self.b.forward(&a_out);
        leaky_relu_inplace(&mut b_out);
        (
            b_out.clone(),
            DcCache {
                input: x,
                a_out,
                b_out,
            },
        )
    }

    fn backward(&self, cache: &DcCache, mut d_out: Array3<f32>) -> (Array3<f32>, DcGrad) {
        leaky_relu_backward_inplace(&mut d_out, &cache.b_out);
        let (mut d_a, d_wb, d_bb) = self.b.backward(&cache.a_out, &d_out);
        leaky_relu_backward_inplace(&mut d_a, &cache.a_out);
        let (d_x, d_wa, d_ba) = self.a.backward(&cache.input, &d_a);
        (
            d_x,
            DcGrad {
                a: ConvGrad {
                    weight: d_wa,
                    bias: d_ba,
                },
                b: ConvGrad {
                    weight: d_wb,
                    bias: d_bb,
                },
            },
        )
    }
}

struct DcCache {
    input: Array3<f32>,
    a_out: Array3<f32>,
    b_out: Array3<f32>,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvGrad {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl ConvGrad {
    fn zeros_like(conv: &Conv2d) -> Self {
        Self {
            weight: Array2::zeros(conv.weight.dim()),
            bias: Array1::zeros(conv.bias.len()),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DcGrad {
    pub a: ConvGrad,
    pub b: ConvGrad,
}

/// Gradient (or momentum buffer) with the same layout as the model
/// parameters.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub(crate) enc: Vec<DcGrad>,
    pub(crate) dec: Vec<DcGrad>,
    pub(crate) head: ConvGrad,
}

impl ParamGrads {
    pub fn zeros_like(model: &Segmenter) -> Self {
        let dc = |dc: &DoubleConv| DcGrad {
            a: ConvGrad::zeros_like(&dc.a),
            b: ConvGrad::zeros_like(&dc.b),
        };
        Self {
            enc: model.enc.iter().map(dc).collect(),
            dec: model.dec.iter().map(dc).collect(),
            head: ConvGrad::zeros_like(&model.head),
        }
    }

    fn for_each_pair(&mut self, other: &ParamGrads, mut f: impl FnMut(&mut f32, f32)) {
        let conv = |a: &mut ConvGrad, b: &ConvGrad, f: &mut dyn FnMut(&mut f32, f32)| {
            for (x, &y) in a.weight.iter_mut().zip(b.weight.iter()) {
                f(x, y);
            }
            for (x, &y) in a.bias.iter_mut().zip(b.bias.iter()) {
                f(x, y);
            }
        };
        for (a, b) in self.enc.iter_mut().zip(&other.enc) {
            conv(&mut a.a, &b.a, &mut f);
            conv(&mut a.b, &b.b, &mut f);
        }
        for (a, b) in self.dec.iter_mut().zip(&other.dec) {
            conv(&mut a.a, &b.a, &mut f);
            conv(&mut a.b, &b.b, &mut f);
        }
        conv(&mut self.head, &other.head, &mut f);
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        self.for_each_pair(other, |a, b| *a += b);
    }

    pub fn scale(&mut self, s: f32) {
        let other = self.clone();
        self.for_each_pair(&other, |a, _| *a *= s);
    }

    /// v = momentum * v + g
    pub fn momentum_update(&mut self, grads: &ParamGrads, momentum: f32) {
        self.for_each_pair(grads, |v, g| *v = momentum * *v + g);
    }

    pub fn max_abs(&self) -> f32 {
        let mut m = 0f32;
        let mut probe = self.clone();
        probe.for_each_pair(self, |_, g| m = m.max(g.abs()));
        m
    }

    /// L2 norm over every entry, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        let mut sum = 0f64;
        let mut probe = self.clone();
        probe.for_each_pair(self, |_, g| sum += f64::from(g) * f64::from(g));
        sum.sqrt()
    }
}

/// Caches from one training forward pass, consumed by `backward`.
pub struct Tape {
    enc_caches: Vec<DcCache>,
    pool_indices: Vec<(Vec<u32>, (usize, usize, usize))>,
    dec_caches: Vec<DcCache>,
    head_input: Array3<f32>,
    /// Raw two-channel head output: [0] mask logit, [1] uncertainty
    /// pre-activation.
    pub logits: Array3<f32>,
}

#[derive(Debug)]
pub struct Segmenter {
    config: ModelConfig,
    enc: Vec<DoubleConv>,
    dec: Vec<DoubleConv>,
    head: Conv2d,
}

impl Segmenter {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let ch = |level: usize| config.base_channels << level;
        let mut enc = Vec::new();
        for level in 0..=config.depth {
            let c_in = if level == 0 {
                INPUT_CHANNELS
            } else {
                ch(level - 1)
            };
            enc.push(DoubleConv {
                a: init_conv(&mut rng, c_in, ch(level), 3, 1),
                b: init_conv(&mut rng, ch(level), ch(level), 3, 1),
            });
        }
        let mut dec = Vec::new();
        for level in 0..config.depth {
            let c_in = ch(level + 1) + ch(level);
            dec.push(DoubleConv {
                a: init_conv(&mut rng, c_in, ch(level), 3, 1),
                b: init_conv(&mut rng, ch(level), ch(level), 3, 1),
            });
        }
        let head = init_conv(&mut rng, ch(0), 2, 1, 0);
        Ok(Self {
            config,
            enc,
            dec,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        let dc = |d: &DoubleConv| d.a.param_count() + d.b.param_count();
        self.enc.iter().map(dc).sum::<usize>()
            + self.dec.iter().map(dc).sum::<usize>()
            + self.head.param_count()
    }

    fn check_input(&self, input: &Array3<f32>) -> Result<(), ModelError> {
        let expected = (
            INPUT_CHANNELS,
            self.config.input_size,
            self.config.input_size,
        );
        if input.dim() != expected {
            return Err(ModelError::InputShape {
                expected,
                got: input.dim(),
            });
        }
        Ok(())
    }

    /// Inference pass; no gradient bookkeeping.
    pub fn forward(&self, input: &Array3<f32>) -> Result<ModelOutput, ModelError> {
        self.check_input(input)?;
        let mut x = self.enc[0].forward(input);
        let mut skips = vec![x.clone()];
        for level in 1..=self.config.depth {
            let (pooled, _) = maxpool2(&x);
            x = self.enc[level].forward(&pooled);
            if level < self.config.depth {
                skips.push(x.clone());
            }
        }
        for level in (0..self.config.depth).rev() {
            let up = upsample2(&x);
            let cat = concat_channels(&up, &skips[level]);
            x = self.dec[level].forward(&cat);
        }
        let logits = self.head.forward(&x);
        Ok(output_from_logits(&logits))
    }

    /// Forward pass that records everything `backward` needs.
    pub fn forward_train(&self, input: &Array3<f32>) -> Result<(ModelOutput, Tape), ModelError> {
        self.check_input(input)?;
        let depth = self.config.depth;
        let mut enc_caches = Vec::with_capacity(depth + 1);
        let mut pool_indices = Vec::with_capacity(depth);
        let (mut x, cache) = self.enc[0].forward_cached(input.clone());
        enc_caches.push(cache);
        for level in 1..=depth {
            let in_dim = x.dim();
            let (pooled, idx) = maxpool2(&x);
            pool_indices.push((idx, in_dim));
            let (y, cache) = self.enc[level].forward_cached(pooled);
            enc_caches.push(cache);
            x = y;
        }
        let mut dec_caches: Vec<Option<DcCache>> = (0..depth).map(|_| None).collect();
        for level in (0..depth).rev() {
            let up = upsample2(&x);
            let cat = concat_channels(&up, &enc_caches[level].b_out);
            let (y, cache) = self.dec[level].forward_cached(cat);
            dec_caches[level] = Some(cache);
            x = y;
        }
        let logits = self.head.forward(&x);
        let output = output_from_logits(&logits);
        let tape = Tape {
            enc_caches,
            pool_indices,
            dec_caches: dec_caches.into_iter().map(Option::unwrap).collect(),
            head_input: x,
            logits,
        };
        Ok((output, tape))
    }

    /// Backpropagate a gradient with respect to the raw head output
    /// (channel 0: mask logit, channel 1: uncertainty pre-activation).
    pub fn backward(&self, tape: &Tape, d_logits: &Array3<f32>) -> ParamGrads {
        let depth = self.config.depth;
        let mut grads = ParamGrads::zeros_like(self);
        let (mut d_x, d_wh, d_bh) = self.head.backward(&tape.head_input, d_logits);
        grads.head = ConvGrad {
            weight: d_wh,
            bias: d_bh,
        };
        // Skip-connection gradients accumulate per encoder level.
        let mut d_skip: Vec<Option<Array3<f32>>> = (0..=depth).map(|_| None).collect();
        for level in 0..depth {
            let (d_cat, grad) = self.dec[level].backward(&tape.dec_caches[level], d_x);
            grads.dec[level] = grad;
            let up_channels = self.config.base_channels << (level + 1);
            let (d_up, d_sk) = split_channels(&d_cat, up_channels);
            d_skip[level] = Some(d_sk);
            d_x = upsample2_backward(&d_up);
        }
        // d_x now carries the gradient at the bottleneck output.
        let mut d_out = d_x;
        for level in (0..=depth).rev() {
            if let Some(sk) = d_skip[level].take() {
                d_out += &sk;
            }
            let (d_in, grad) = self.enc[level].backward(&tape.enc_caches[level], d_out);
            grads.enc[level] = grad;
            if level > 0 {
                let (idx, in_dim) = &tape.pool_indices[level - 1];
                d_out = maxpool2_backward(&d_in, idx, *in_dim);
            } else {
                d_out = d_in; // gradient w.r.t. the network input, unused
            }
        }
        grads
    }

    /// SGD step with a pre-computed momentum buffer: w -= lr * v.
    pub fn apply_update(&mut self, velocity: &ParamGrads, lr: f32) {
        let conv = |c: &mut Conv2d, g: &ConvGrad| {
            for (w, &v) in c.weight.iter_mut().zip(g.weight.iter()) {
                *w -= lr * v;
            }
            for (b, &v) in c.bias.iter_mut().zip(g.bias.iter()) {
                *b -= lr * v;
            }
        };
        for (block, grad) in self.enc.iter_mut().zip(&velocity.enc) {
            conv(&mut block.a, &grad.a);
            conv(&mut block.b, &grad.b);
        }
        for (block, grad) in self.dec.iter_mut().zip(&velocity.dec) {
            conv(&mut block.a, &grad.a);
            conv(&mut block.b, &grad.b);
        }
        conv(&mut self.head, &velocity.head);
    }

    /// Stable iteration over parameters for serialization: (name, conv).
    pub(crate) fn named_convs(&self) -> Vec<(String, &Conv2d)> {
        let mut out = Vec::new();
        for (i, block) in self.enc.iter().enumerate() {
            out.push((format!("enc{i}.a"), &block.a));
            out.push((format!("enc{i}.b"), &block.b));
        }
        for (i, block) in self.dec.iter().enumerate() {
            out.push((format!("dec{i}.a"), &block.a));
            out.push((format!("dec{i}.b"), &block.b));
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    pub(crate) fn named_convs_mut(&mut self) -> Vec<(String, &mut Conv2d)> {
        let mut out = Vec::new();
        for (i, block) in self.enc.iter_mut().enumerate() {
            out.push((format!("enc{i}.a"), &mut block.a));
            out.push((format!("enc{i}.b"), &mut block.b));
        }
        for (i, block) in self.dec.iter_mut().enumerate() {
            out.push((format!("dec{i}.a"), &mut block.a));
            out.push((format!("dec{i}.b"), &mut block.b));
        }
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), ModelError> {
        checkpoint::save(self, path)
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self, ModelError> {
        checkpoint::load(path)
    }
}

fn output_from_logits(logits: &Array3<f32>) -> ModelOutput {
    let h = logits.dim().1;
    let w = logits.dim().2;
    let mask_prob = Array2::from_shape_fn((h, w), |(r, c)| sigmoid(logits[[0, r, c]]));
    let uncertainty = Array2::from_shape_fn((h, w), |(r, c)| {
        softplus(logits[[1, r, c]]).max(UNCERTAINTY_FLOOR)
    });
    ModelOutput {
        mask_prob,
        uncertainty,
    }
}

/// Kaiming-style uniform init: bound sqrt(6 / fan_in), zero biases.
fn init_conv(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, pad: usize) -> Conv2d {
    let fan_in = (c_in * k * k) as f32;
    let bound = (6.0 / fan_in).sqrt();
    let mut conv = Conv2d::zeros(c_in, c_out, k, pad);
    conv.weight.mapv_inplace(|_| rng.gen_range(-bound..bound));
    conv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            base_channels: 4,
            depth: 2,
            seed: 9,
        }
    }

    fn random_input(seed: u64, size: usize) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((INPUT_CHANNELS, size, size), |_| rng.gen_range(0.0f32..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            input_size: 100,
            depth: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero = ModelConfig {
            depth: 0,
            ..ModelConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn forward_output_ranges_and_shape() {
        for depth in 1..=3 {
            let cfg = ModelConfig {
                input_size: 16,
                base_channels: 3,
                depth,
                seed: depth as u64,
            };
            let model = Segmenter::new(cfg).unwrap();
            let out = model.forward(&random_input(depth as u64, 16)).unwrap();
            assert_eq!(out.mask_prob.dim(), (16, 16));
            assert_eq!(out.uncertainty.dim(), (16, 16));
            assert!(out.mask_prob.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(out.uncertainty.iter().all(|&v| v >= UNCERTAINTY_FLOOR));
        }
    }

    #[test]
    fn same_seed_same_output_different_seed_different_output() {
        let a = Segmenter::new(small_config()).unwrap();
        let b = Segmenter::new(small_config()).unwrap();
        let c = Segmenter::new(ModelConfig {
            seed: 10,
            ..small_config()
        })
        .unwrap();
        let input = random_input(1, 16);
        let oa = a.forward(&input).unwrap();
        let ob = b.forward(&input).unwrap();
        let oc = c.forward(&input).unwrap();
        assert_eq!(oa.mask_prob, ob.mask_prob);
        assert_eq!(oa.uncertainty, ob.uncertainty);
        assert_ne!(oa.mask_prob, oc.mask_prob);
    }

    #[test]
    fn forward_train_matches_forward() {
        let model = Segmenter::new(small_config()).unwrap();
        let input = random_input(2, 16);
        let plain = model.forward(&input).unwrap();
        let (trained, tape) = model.forward_train(&input).unwrap();
        assert_eq!(plain.mask_prob, trained.mask_prob);
        assert_eq!(plain.uncertainty, trained.uncertainty);
        assert_eq!(tape.logits.dim(), (2, 16, 16));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let model = Segmenter::new(small_config()).unwrap();
        let bad = Array3::<f32>::zeros((INPUT_CHANNELS, 8, 8));
        assert!(matches!(
            model.forward(&bad),
            Err(ModelError::InputShape { .. })
        ));
    }

    #[test]
    fn param_count_matches_layer_arithmetic() {
        // depth 2, base 4: encoder blocks (5->4->4), (4->8->8), (8->16->16);
        // decoders (16+8->8->8), (8+4->4->4); head 4->2 1x1.
        let model = Segmenter::new(small_config()).unwrap();
        let expect = (5 * 4 * 9 + 4 + 4 * 4 * 9 + 4)
            + (4 * 8 * 9 + 8 + 8 * 8 * 9 + 8)
            + (8 * 16 * 9 + 16 + 16 * 16 * 9 + 16)
            + ((16 + 8) * 8 * 9 + 8 + 8 * 8 * 9 + 8)
            + ((8 + 4) * 4 * 9 + 4 + 4 * 4 * 9 + 4)
            + (4 * 2 + 2);
        assert_eq!(model.param_count(), expect);
    }

    #[test]
    fn backward_matches_finite_differences_through_whole_network() {
        // Objective: weighted sum of raw logits, so d_logits is the weight
        // grid itself and any parameter's derivative can be probed directly.
        let cfg = ModelConfig {
            input_size: 8,
            base_channels: 2,
            depth: 1,
            seed: 5,
        };
        let model = Segmenter::new(cfg).unwrap();
        let input = random_input(3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coeff = Array3::from_shape_fn((2, 8, 8), |_| rng.gen_range(-1.0f32..1.0));
        let objective = |m: &Segmenter| -> f32 {
            let (_, tape) = m.forward_train(&input).unwrap();
            tape.logits
                .iter()
                .zip(coeff.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, tape) = model.forward_train(&input).unwrap();
        let grads = model.backward(&tape, &coeff);

        let eps = 1e-2f32;
        // Probe one weight in each part of the network.
        let probes: [(&str, usize); 5] = [
            ("enc0.a", 7),
            ("enc0.b", 3),
            ("enc1.a", 11),
            ("dec0.a", 5),
            ("head", 1),
        ];
        for (name, flat) in probes {
            let analytic = {
                let g = match name {
                    "enc0.a" => &grads.enc[0].a,
                    "enc0.b" => &grads.enc[0].b,
                    "enc1.a" => &grads.enc[1].a,
                    "dec0.a" => &grads.dec[0].a,
                    "head" => &grads.head,
                    _ => unreachable!(),
                };
                g.weight.as_slice().unwrap()[flat]
            };
            let mut probe = Segmenter::new(cfg).unwrap();
            let bump = |m: &mut Segmenter, delta: f32| {
                for (n, conv) in m.named_convs_mut() {
                    if n == name {
                        conv.weight.as_slice_mut().unwrap()[flat] += delta;
                    }
                }
            };
            bump(&mut probe, eps);
            let plus = objective(&probe);
            bump(&mut probe, -2.0 * eps);
            let minus = objective(&probe);
            let numeric = (plus - minus) / (2.0 * eps);
            assert!(
                (analytic - numeric).abs() < 2e-2_f32.max(numeric.abs() * 0.05),
                "{name}[{flat}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn momentum_update_and_apply_change_outputs() {
        let mut model = Segmenter::new(small_config()).unwrap();
        let input = random_input(4, 16);
        let before = model.forward(&input).unwrap();
        let (_, tape) = model.forward_train(&input).unwrap();
        let d = Array3::from_elem((2, 16, 16), 0.01f32);
        let grads = model.backward(&tape, &d);
        let mut velocity = ParamGrads::zeros_like(&model);
        velocity.momentum_update(&grads, 0.9);
        model.apply_update(&velocity, 0.1);
        let after = model.forward(&input).unwrap();
        assert_ne!(before.mask_prob, after.mask_prob);
    }

    #[test]
    fn global_norm_and_scale_cover_every_entry() {
        let model = Segmenter::new(small_config()).unwrap();
        let mut grads = ParamGrads::zeros_like(&model);
        grads.head.weight.as_slice_mut().unwrap()[0] = 3.0;
        grads.enc[0].a.bias[0] = 4.0;
        assert!((grads.global_norm() - 5.0).abs() < 1e-12);
        grads.scale(0.5);
        assert!((grads.global_norm() - 2.5).abs() < 1e-12);
    }
}
