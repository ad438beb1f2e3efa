//! Reusable network blocks: convolution stacks, encoder/decoder blocks, and
//! the two channel-attention gates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{
    self, batchnorm2d, bilinear_upsample2x, concat_channels, conv1d_channels, conv2d,
    global_avg_pool, linear, maxpool2d, mul_channelwise, relu, reshape, sigmoid, ConvParams,
};
pub use crate::ops::NormMode;
use crate::real::Real;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// He-uniform initialization: U(−√(6/fan_in), √(6/fan_in)).
pub fn he_uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<T> =
        (0..numel).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::param(data, shape).expect("init shape is valid")
}

/// Named parameter/state visitor used by optimizers and checkpoints. State
/// tensors include non-trainable buffers (running statistics); parameters
/// are exactly the `requires_grad` subset, in construction order.
pub trait Layer<T: Real> {
    fn collect_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>);

    fn parameters(&self) -> Vec<Tensor<T>> {
        let mut state = Vec::new();
        self.collect_state("", &mut state);
        state.into_iter().map(|(_, t)| t).filter(|t| t.requires_grad()).collect()
    }
}

// ── Conv2d ───────────────────────────────────────────────────────────

pub struct Conv2d<T: Real> {
    pub params: ConvParams<T>,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Self {
        let fan_in = (c_in / groups) * kernel * kernel;
        let weight = he_uniform(rng, &[c_out, c_in / groups, kernel, kernel], fan_in);
        let bias = Tensor::param(vec![T::zero(); c_out], &[c_out]).unwrap();
        Conv2d {
            params: ConvParams::new(weight, Some(bias), stride, padding, groups)
                .expect("constructor arguments are consistent"),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.params)
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    fn collect_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.params.weight.clone()));
        if let Some(b) = &self.params.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

// ── BatchNorm2d ──────────────────────────────────────────────────────

pub struct BatchNorm2d<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::param(vec![T::one(); channels], &[channels]).unwrap(),
            beta: Tensor::param(vec![T::zero(); channels], &[channels]).unwrap(),
            running_mean: Tensor::from_vec(vec![T::zero(); channels], &[channels]).unwrap(),
            running_var: Tensor::from_vec(vec![T::one(); channels], &[channels]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        batchnorm2d(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            BN_MOMENTUM,
            BN_EPS,
            mode,
        )
    }
}

impl<T: Real> Layer<T> for BatchNorm2d<T> {
    fn collect_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
        out.push((format!("{prefix}.running_mean"), self.running_mean.clone()));
        out.push((format!("{prefix}.running_var"), self.running_var.clone()));
    }
}

// ── ConvBnRelu / ConvBlock ───────────────────────────────────────────

/// One 3×3 convolution (pad 1) followed by normalization and ReLU.
pub struct ConvBnRelu<T: Real> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Real> ConvBnRelu<T> {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        ConvBnRelu { conv: Conv2d::new(rng, c_in, c_out, 3, 1, 1, 1), bn: BatchNorm2d::new(c_out) }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        relu(&self.bn.forward(&self.conv.forward(x)?, mode)?)
    }
}

impl<T: Real> Layer<T> for ConvBnRelu<T> {
    fn collect_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.conv.collect_state(&format!("{prefix}.conv"), out);
        self.bn.collect_state(&format!("{prefix}.bn"), out);
    }
}

/// Two 3×3 conv+norm+relu units. Spatial size is preserved; the block's
/// output width is `c_out`. `new` widens at the first conv
/// (in→out, out→out); `expand_last` widens at the second (in→in, in→out),
/// which is what the encoder's doubling blocks use.
pub struct ConvBlock<T: Real> {
    pub unit1: ConvBnRelu<T>,
    pub unit2: ConvBnRelu<T>,
    c_in: usize,
    c_out: usize,
}

impl<T: Real> ConvBlock<T> {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        ConvBlock {
            unit1: ConvBnRelu::new(rng, c_in, c_out),
            unit2: ConvBnRelu::new(rng, c_out, c_out),
            c_in,
            c_out,
        }
    }

    pub fn expand_last(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        ConvBlock {
            unit1: ConvBnRelu::new(rng, c_in, c_in),
            unit2: ConvBnRelu::new(rng, c_in, c_out),
            c_in,
            c_out,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        if x.shape()[1] != self.c_in {
            return Err(Error::shape(
                "conv_block",
                format!("expected {} input channels, got {}", self.c_in, x.shape()[1]),
            ));
        }
        self.unit2.forward(&self.unit1.forward(x, mode)?, mode)
    }
}

impl<T: Real> Layer<T> for ConvBlock<T> {
    fn collect_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.unit1.collect_state(&format!("{prefix}.unit1"), out);
        self.unit2.collect_state(&format!("{prefix}.unit2"), out);
    }
}

// ── DownBlock ────────────────────────────────────────────────────────

/// Halves the spatial size and doubles the channel count: 2×2 max pooling
/// followed by a ConvBlock.
pub struct DownBlock<T: Real> {
    pub block: ConvBlock<T>,
}

impl<T: Real> DownBlock<T> {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize) -> Self {
        DownBlock { block: ConvBlock::expand_last(rng, c_in, 2 * c_in) }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        self.block.forward(&maxpool2d(x)?, mode)
    }
}

impl<T: Real> Layer<T> for DownBlock<T> {
    fn collect_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.block.collect_state(&format!("{prefix}.block"), out);
    }
}

// ── ECA ──────────────────────────────────────────────────────────────

/// Adaptive 1-D kernel size for efficient channel attention: the nearest
/// odd integer to (log2(C)+1)/2, at least 3.
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = ((channels as f64).log2() + 1.0) / 2.0;
    let r = t.round();
    let k = if (r as i64).rem_euclid(2) == 1 {
        r as i64
    } else if t >= r {
        r as i64 + 1
    } else {
        r as i64 - 1
    };
    k.max(3) as usize
}

/// Efficient channel attention: per-channel sigmoid gate produced by a 1-D
/// convolution over the pooled channel descriptor. Shape-preserving.
pub struct EcaLayer<T: Real> {
    pub kernel: Tensor<T>,
    channels: usize,
}

impl<T: Real> EcaLayer<T> {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let k = eca_kernel_size(channels);
        EcaLayer { kernel: he_uniform(rng, &[k], k), channels }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        if c != self.channels {
            return Err(Error::shape(
                "eca",
                format!("layer built for {} channels, got {c}", self.channels),
            ));
        }
        let pooled = reshape(&global_avg_pool(x)?, &[n, c])?;
        let gate = sigmoid(&conv1d_channels(&pooled, &self.kernel)?)?;
        mul_channelwise(x, &reshape(&gate, &[n, c, 1, 1])?)
    }
}

impl<T: Real> Layer<T> for EcaLayer<T> {
    fn collect_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.kernel"), self.kernel.clone()));
    }
}

// ── Linear / CCA ─────────────────────────────────────────────────────

pub struct Linear<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        Linear {
            weight: he_uniform(rng, &[c_out, c_in], c_in),
            bias: Tensor::param(vec![T::zero(); c_out], &[c_out]).unwrap(),
        }
    }

    pub fn forward(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        linear(v, &self.weight, &self.bias)
    }
}

impl<T: Real> Layer<T> for Linear<T> {
    fn collect_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Channel cross attention: gates the skip connection's channels with a
/// sigmoid mask computed from the pooled skip and decoder descriptors.
/// Output shape equals the skip input shape.
pub struct CcaLayer<T: Real> {
    pub map_skip: Linear<T>,
    pub map_decoder: Linear<T>,
    skip_channels: usize,
    decoder_channels: usize,
}

impl<T: Real> CcaLayer<T> {
    pub fn new(rng: &mut ChaCha8Rng, skip_channels: usize, decoder_channels: usize) -> Self {
        CcaLayer {
            map_skip: Linear::new(rng, skip_channels, skip_channels),
            map_decoder: Linear::new(rng, decoder_channels, skip_channels),
            skip_channels,
            decoder_channels,
        }
    }

    pub fn forward(&self, skip: &Tensor<T>, decoder: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, cs) = (skip.shape()[0], skip.shape()[1]);
        let cd = decoder.shape()[1];
        if cs != self.skip_channels || cd != self.decoder_channels || decoder.shape()[0] != n {
            return Err(Error::shape(
                "cca",
                format!(
                    "layer built for skip {} / decoder {}, got {:?} and {:?}",
                    self.skip_channels,
                    self.decoder_channels,
                    skip.shape(),
                    decoder.shape()
                ),
            ));
        }
        let s = self.map_skip.forward(&reshape(&global_avg_pool(skip)?, &[n, cs])?)?;
        let d = self.map_decoder.forward(&reshape(&global_avg_pool(decoder)?, &[n, cd])?)?;
        let one = Tensor::scalar(T::one());
        let mask = sigmoid(&ops::add_weighted(&s, &d, &one, &one)?)?;
        mul_channelwise(skip, &reshape(&mask, &[n, cs, 1, 1])?)
    }
}

impl<T: Real> Layer<T> for CcaLayer<T> {
    fn collect_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.map_skip.collect_state(&format!("{prefix}.map_skip"), out);
        self.map_decoder.collect_state(&format!("{prefix}.map_decoder"), out);
    }
}

// ── UpBlock ──────────────────────────────────────────────────────────

/// Decoder stage: bilinear 2× upsampling of the decoder map, CCA gating of
/// the skip, channel concatenation, then a ConvBlock down to the skip's
/// channel count.
pub struct UpBlock<T: Real> {
    pub cca: CcaLayer<T>,
    pub block: ConvBlock<T>,
}

impl<T: Real> UpBlock<T> {
    pub fn new(rng: &mut ChaCha8Rng, decoder_channels: usize, skip_channels: usize) -> Self {
        UpBlock {
            cca: CcaLayer::new(rng, skip_channels, decoder_channels),
            block: ConvBlock::new(rng, skip_channels + decoder_channels, skip_channels),
        }
    }

    pub fn forward(
        &self,
        decoder_in: &Tensor<T>,
        fused_skip: &Tensor<T>,
        mode: NormMode,
    ) -> Result<Tensor<T>> {
        let up = bilinear_upsample2x(decoder_in)?;
        if up.shape()[2] != fused_skip.shape()[2] || up.shape()[3] != fused_skip.shape()[3] {
            return Err(Error::shape(
                "up_block",
                format!(
                    "upsampled decoder {:?} does not match skip {:?}",
                    up.shape(),
                    fused_skip.shape()
                ),
            ));
        }
        let gated = self.cca.forward(fused_skip, &up)?;
        self.block.forward(&concat_channels(&gated, &up)?, mode)
    }
}

impl<T: Real> Layer<T> for UpBlock<T> {
    fn collect_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.cca.collect_state(&format!("{prefix}.cca"), out);
        self.block.collect_state(&format!("{prefix}.block"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn conv_block_shape_contract() {
        let mut r = rng();
        let block = ConvBlock::<f64>::new(&mut r, 3, 16);
        let x = rand_tensor(&mut r, &[1, 3, 16, 16]);
        let y = block.forward(&x, NormMode::Train).unwrap();
        assert_eq!(y.shape(), &[1, 16, 16, 16]);
        // Wrong channel count is an error.
        let bad = rand_tensor(&mut r, &[1, 4, 16, 16]);
        assert!(block.forward(&bad, NormMode::Train).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_preactivation() {
        let mut r = rng();
        let unit = ConvBnRelu::<f64>::new(&mut r, 2, 4);
        let x = Tensor::<f64>::zeros(&[1, 2, 8, 8]);
        let pre = unit.conv.forward(&x).unwrap();
        assert!(pre.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn down_block_halves_and_doubles() {
        let mut r = rng();
        let down = DownBlock::<f64>::new(&mut r, 8);
        let x = rand_tensor(&mut r, &[2, 8, 16, 16]);
        let y = down.forward(&x, NormMode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 16, 8, 8]);
        // Odd spatial dims rejected by the pooling stage.
        let odd = rand_tensor(&mut r, &[1, 8, 6, 7]);
        assert!(down.forward(&odd, NormMode::Train).is_err());
    }

    #[test]
    fn encoder_channel_sequence() {
        let mut r = rng();
        let d1 = DownBlock::<f64>::new(&mut r, 64);
        let d2 = DownBlock::<f64>::new(&mut r, 128);
        let d3 = DownBlock::<f64>::new(&mut r, 256);
        assert_eq!(d1.block.out_channels(), 128);
        assert_eq!(d2.block.out_channels(), 256);
        assert_eq!(d3.block.out_channels(), 512);
    }

    #[test]
    fn eca_kernel_sizes() {
        assert_eq!(eca_kernel_size(4), 3);
        assert_eq!(eca_kernel_size(16), 3);
        assert_eq!(eca_kernel_size(64), 3);
        assert_eq!(eca_kernel_size(128), 5);
        assert_eq!(eca_kernel_size(256), 5);
    }

    #[test]
    fn eca_zero_kernel_halves_input() {
        let mut r = rng();
        let mut eca = EcaLayer::<f64>::new(&mut r, 8);
        eca.kernel = Tensor::param(vec![0.0; 3], &[3]).unwrap();
        let x = rand_tensor(&mut r, &[2, 8, 4, 4]);
        let y = eca.forward(&x).unwrap();
        for (got, want) in y.data().iter().zip(x.data().iter()) {
            assert!((got - 0.5 * want).abs() < 1e-15);
        }
    }

    #[test]
    fn eca_scale_is_constant_per_channel() {
        let mut r = rng();
        let eca = EcaLayer::<f64>::new(&mut r, 4);
        let x = rand_tensor(&mut r, &[1, 4, 5, 5]);
        let y = eca.forward(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        let (xd, yd) = (x.data(), y.data());
        for c in 0..4 {
            let base = c * 25;
            let ratio = yd[base] / xd[base];
            assert!(ratio > 0.0 && ratio < 1.0, "gate must be in (0,1), got {ratio}");
            for p in 1..25 {
                assert!((yd[base + p] / xd[base + p] - ratio).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cca_zero_weights_halves_skip() {
        let mut r = rng();
        let mut cca = CcaLayer::<f64>::new(&mut r, 4, 8);
        cca.map_skip.weight = Tensor::param(vec![0.0; 16], &[4, 4]).unwrap();
        cca.map_decoder.weight = Tensor::param(vec![0.0; 32], &[4, 8]).unwrap();
        let skip = rand_tensor(&mut r, &[1, 4, 6, 6]);
        let dec = rand_tensor(&mut r, &[1, 8, 6, 6]);
        let y = cca.forward(&skip, &dec).unwrap();
        for (got, want) in y.data().iter().zip(skip.data().iter()) {
            assert!((got - 0.5 * want).abs() < 1e-15);
        }
    }

    #[test]
    fn up_block_shapes() {
        let mut r = rng();
        let up = UpBlock::<f64>::new(&mut r, 2, 1);
        let dec = rand_tensor(&mut r, &[1, 2, 2, 2]);
        let skip = rand_tensor(&mut r, &[1, 1, 4, 4]);
        let y = up.forward(&dec, &skip, NormMode::Train).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        // Mismatched spatial relation is an error.
        let bad_skip = rand_tensor(&mut r, &[1, 1, 8, 8]);
        assert!(up.forward(&dec, &bad_skip, NormMode::Train).is_err());
    }

    #[test]
    fn parameters_are_requires_grad_subset() {
        let mut r = rng();
        let block = ConvBnRelu::<f64>::new(&mut r, 2, 4);
        let mut state = Vec::new();
        block.collect_state("b", &mut state);
        // conv w+b, bn gamma/beta + running mean/var
        assert_eq!(state.len(), 6);
        assert_eq!(block.parameters().len(), 4);
    }
}
