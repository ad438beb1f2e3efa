//! The assembled FusionU-Net: configuration, forward pass, cost accounting,
//! and checkpoint serialization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{eca_kernel_size, Conv2d, ConvBlock, DownBlock, Layer, NormMode, UpBlock};
use crate::error::{Error, Result};
use crate::fusion::{fusion_module_forward, FeaturePyramid, FuseBlock, FusionMode, ResampleMode};
use crate::real::{Dtype, Real};
use crate::tensor::Tensor;
use crate::tensorio;

/// Reference full-scale operating point used by the `info` cost report:
/// parameter count (millions) and FLOPs (billions) at 1×3×224×224.
pub const REFERENCE_PARAMS_M: f64 = 25.80;
pub const REFERENCE_FLOPS_G: f64 = 55.95;
pub const PARAMS_BAND: f64 = 0.20;
pub const FLOPS_BAND: f64 = 0.25;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    /// Stem width C; the encoder pyramid is C, 2C, 4C, 8C with a 16C
    /// bottleneck.
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    /// Square input side, divisible by 16.
    #[serde(default = "default_input_side")]
    pub input_side: usize,
    #[serde(default = "default_fusion_mode")]
    pub fusion_mode: FusionMode,
    #[serde(default = "default_resample_mode")]
    pub resample_mode: ResampleMode,
    /// Number of stacked FuseBlocks.
    #[serde(default = "default_fuse_stack")]
    pub fuse_stack: usize,
    #[serde(default = "default_precision")]
    pub precision: Dtype,
}

fn default_in_channels() -> usize {
    3
}
fn default_n_classes() -> usize {
    2
}
fn default_base_width() -> usize {
    64
}
fn default_input_side() -> usize {
    224
}
fn default_fusion_mode() -> FusionMode {
    FusionMode::Both
}
fn default_resample_mode() -> ResampleMode {
    ResampleMode::ReorganizeGroupConv
}
fn default_fuse_stack() -> usize {
    1
}
fn default_precision() -> Dtype {
    Dtype::F32
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            in_channels: 3,
            n_classes: 2,
            base_width: 64,
            input_side: 224,
            fusion_mode: FusionMode::Both,
            resample_mode: ResampleMode::ReorganizeGroupConv,
            fuse_stack: 1,
            precision: Dtype::F32,
        }
    }
}

impl FusionConfig {
    /// Small configuration that trains in minutes on a laptop CPU.
    pub fn desk() -> Self {
        FusionConfig { base_width: 16, input_side: 64, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side == 0 || self.input_side % 16 != 0 {
            return Err(Error::InvalidConfig(format!(
                "input side {} must be a positive multiple of 16",
                self.input_side
            )));
        }
        if self.base_width < 4 || self.base_width % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "base width {} must be at least 4 and divisible by 4",
                self.base_width
            )));
        }
        if self.in_channels == 0 || self.n_classes < 2 || self.fuse_stack == 0 {
            return Err(Error::InvalidConfig(
                "in_channels, n_classes and fuse_stack must be positive (n_classes ≥ 2)".into(),
            ));
        }
        Ok(())
    }
}

/// Encoder, fusion module, decoder and classifier head.
pub struct FusionUNet<T: Real> {
    pub config: FusionConfig,
    pub stem: ConvBlock<T>,
    pub downs: Vec<DownBlock<T>>,
    pub fusion: Vec<FuseBlock<T>>,
    pub ups: Vec<UpBlock<T>>,
    pub classifier: Conv2d<T>,
}

/// Builds a network with He-uniform conv weights; deterministic per seed.
pub fn build<T: Real>(config: &FusionConfig, seed: u64) -> Result<FusionUNet<T>> {
    config.validate()?;
    if T::DTYPE != config.precision {
        return Err(Error::InvalidConfig(format!(
            "config precision {} does not match element type {}",
            config.precision,
            T::DTYPE
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = config.base_width;

    let stem = ConvBlock::new(&mut rng, config.in_channels, c);
    let downs = vec![
        DownBlock::new(&mut rng, c),
        DownBlock::new(&mut rng, 2 * c),
        DownBlock::new(&mut rng, 4 * c),
        DownBlock::new(&mut rng, 8 * c),
    ];
    let fusion = (0..config.fuse_stack)
        .map(|_| FuseBlock::new(&mut rng, c, config.fusion_mode, config.resample_mode))
        .collect();
    let ups = vec![
        UpBlock::new(&mut rng, 16 * c, 8 * c),
        UpBlock::new(&mut rng, 8 * c, 4 * c),
        UpBlock::new(&mut rng, 4 * c, 2 * c),
        UpBlock::new(&mut rng, 2 * c, c),
    ];
    let classifier = Conv2d::new(&mut rng, c, config.n_classes, 1, 1, 0, 1);

    Ok(FusionUNet { config: config.clone(), stem, downs, fusion, ups, classifier })
}

impl<T: Real> FusionUNet<T> {
    /// Runs the encoder, producing the skip pyramid and bottleneck.
    pub fn encode(&self, x: &Tensor<T>, mode: NormMode) -> Result<FeaturePyramid<T>> {
        let expected =
            [x.shape()[0], self.config.in_channels, self.config.input_side, self.config.input_side];
        if x.shape() != expected {
            return Err(Error::shape(
                "forward",
                format!("expected {:?}, got {:?}", expected, x.shape()),
            ));
        }
        let t1 = self.stem.forward(x, mode)?;
        let t2 = self.downs[0].forward(&t1, mode)?;
        let t3 = self.downs[1].forward(&t2, mode)?;
        let t4 = self.downs[2].forward(&t3, mode)?;
        let bottleneck = self.downs[3].forward(&t4, mode)?;
        FeaturePyramid::new([t1, t2, t3, t4], bottleneck)
    }

    /// Applies the fusion stack to the skip pyramid; the bottleneck passes
    /// through untouched.
    pub fn fuse(&self, pyramid: &FeaturePyramid<T>, mode: NormMode) -> Result<FeaturePyramid<T>> {
        fusion_module_forward(pyramid, &self.fusion, mode)
    }

    /// Decoder over the fused pyramid, down to per-class logits.
    pub fn decode(&self, fused: &FeaturePyramid<T>, mode: NormMode) -> Result<Tensor<T>> {
        let mut x = fused.bottleneck.clone();
        for (up, level) in self.ups.iter().zip(fused.levels.iter().rev()) {
            x = up.forward(&x, level, mode)?;
        }
        self.classifier.forward(&x)
    }

    /// Full-resolution logits, N×n_classes×S×S.
    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let pyramid = self.encode(x, mode)?;
        let fused = self.fuse(&pyramid, mode)?;
        self.decode(&fused, mode)
    }

    /// All state tensors (parameters and running statistics) in
    /// construction order — the checkpoint's tensor order.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.stem.collect_state("stem", &mut out);
        for (i, d) in self.downs.iter().enumerate() {
            d.collect_state(&format!("down{}", i + 1), &mut out);
        }
        for (i, f) in self.fusion.iter().enumerate() {
            f.collect_state(&format!("fuse{}", i + 1), &mut out);
        }
        for (i, u) in self.ups.iter().enumerate() {
            u.collect_state(&format!("up{}", i + 1), &mut out);
        }
        self.classifier.collect_state("classifier", &mut out);
        out
    }

    /// Trainable parameters in construction order.
    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.state().into_iter().map(|(_, t)| t).filter(|t| t.requires_grad()).collect()
    }

    pub fn count_params(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    /// FLOPs of one forward pass at the given batch size, by the convention
    /// of [`count_flops`].
    pub fn count_flops(&self, batch: usize) -> u64 {
        count_flops(&self.config, batch)
    }
}

// ── Cost accounting ──────────────────────────────────────────────────

/// FLOP counting convention: one fused multiply–accumulate counts as one
/// FLOP for convolutions and linear maps (the convention common profilers
/// report); elementwise work is counted per output element (ReLU 1,
/// normalization 2, sigmoid 4, bias 1, weighted sum 3, pooling/upsampling
/// by their arithmetic). Permutations (reorganize) cost nothing.
pub fn count_flops(config: &FusionConfig, batch: usize) -> u64 {
    let mut total: u64 = 0;
    let b = batch as u64;
    let conv = |cin: u64, cout: u64, k: u64, groups: u64, hw: u64| -> u64 {
        // MACs + bias add per output element.
        (cin / groups) * cout * k * k * hw + cout * hw
    };
    let bn_relu = |c: u64, hw: u64| -> u64 { 3 * c * hw };
    let eca = |c: u64, hw: u64| -> u64 {
        let k = eca_kernel_size(c as usize) as u64;
        c * hw + k * c + 4 * c + c * hw // pool, conv1d, sigmoid, scale
    };

    let c = config.base_width as u64;
    let s = config.input_side as u64;
    let classes = config.n_classes as u64;
    let inc = config.in_channels as u64;

    // Stem: conv(in→C) + conv(C→C) at full resolution.
    total += conv(inc, c, 3, 1, s * s) + bn_relu(c, s * s);
    total += conv(c, c, 3, 1, s * s) + bn_relu(c, s * s);

    // Encoder: pool then two convs (C→C, C→2C) at the pooled resolution.
    for lvl in 0..4u64 {
        let cin = c << lvl;
        let hw = (s >> (lvl + 1)) * (s >> (lvl + 1));
        total += 3 * cin * hw; // 2×2 max pooling comparisons
        total += conv(cin, cin, 3, 1, hw) + bn_relu(cin, hw);
        total += conv(cin, 2 * cin, 3, 1, hw) + bn_relu(2 * cin, hw);
    }

    // Fusion stack.
    let down_rounds = matches!(config.fusion_mode, FusionMode::DownOnly | FusionMode::Both);
    let up_rounds = matches!(config.fusion_mode, FusionMode::UpOnly | FusionMode::Both);
    for _ in 0..config.fuse_stack {
        for lvl in 0..3u64 {
            let cl = c << lvl; // shallow member's channels
            let hw_deep = (s >> (lvl + 1)) * (s >> (lvl + 1));
            let hw_shallow = (s >> lvl) * (s >> lvl);
            if down_rounds {
                match config.resample_mode {
                    ResampleMode::ReorganizeGroupConv => {
                        total += conv(4 * cl, 2 * cl, 3, cl, hw_deep);
                    }
                    ResampleMode::PoolConv => {
                        total += 3 * cl * hw_shallow + conv(cl, 2 * cl, 3, 1, hw_deep);
                    }
                }
                total += 3 * 2 * cl * hw_deep; // weighted sum
                total += conv(2 * cl, 2 * cl, 3, 1, hw_deep) + bn_relu(2 * cl, hw_deep);
                total += eca(2 * cl, hw_deep);
            }
            if up_rounds {
                match config.resample_mode {
                    ResampleMode::ReorganizeGroupConv => {
                        total += conv(2 * cl, 4 * cl, 3, cl, hw_deep);
                    }
                    ResampleMode::PoolConv => {
                        total += 7 * 2 * cl * hw_shallow + conv(2 * cl, cl, 3, 1, hw_shallow);
                    }
                }
                total += 3 * cl * hw_shallow;
                total += conv(cl, cl, 3, 1, hw_shallow) + bn_relu(cl, hw_shallow);
                total += eca(cl, hw_shallow);
            }
        }
    }

    // Decoder: upsample, CCA, concatenated ConvBlock at each stage.
    for stage in 0..4u64 {
        let lvl = 3 - stage; // skip level index (0-based): up1 uses T4
        let skip_c = c << lvl;
        let dec_c = 2 * skip_c;
        let hw = (s >> lvl) * (s >> lvl);
        total += 7 * dec_c * hw; // bilinear taps
        // CCA: two pools, two linears, add+sigmoid, channel scale.
        total += skip_c * hw + dec_c * (hw / 4);
        total += skip_c * skip_c + skip_c + dec_c * skip_c + skip_c;
        total += 5 * skip_c;
        total += skip_c * hw;
        // ConvBlock on the concatenated map.
        total += conv(skip_c + dec_c, skip_c, 3, 1, hw) + bn_relu(skip_c, hw);
        total += conv(skip_c, skip_c, 3, 1, hw) + bn_relu(skip_c, hw);
    }

    // Classifier 1×1.
    total += conv(c, classes, 1, 1, s * s);

    total * b
}

// ── Checkpoints ──────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 4] = b"FUNW";
const CKPT_VERSION: u32 = 1;

/// Writes the config as length-prefixed JSON followed by every state tensor
/// in construction order.
pub fn save_checkpoint<T: Real>(model: &FusionUNet<T>, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(CKPT_MAGIC)?;
    out.write_all(&CKPT_VERSION.to_le_bytes())?;
    let config_json = serde_json::to_vec(&model.config)?;
    out.write_all(&(config_json.len() as u32).to_le_bytes())?;
    out.write_all(&config_json)?;
    let state = model.state();
    out.write_all(&(state.len() as u32).to_le_bytes())?;
    for (_, tensor) in &state {
        tensorio::write_tensor(&mut out, tensor)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads just the config header of a checkpoint.
pub fn read_checkpoint_config(path: &Path) -> Result<FusionConfig> {
    let file = File::open(path)?;
    let mut input = BufReader::new(file);
    read_config_header(&mut input)
}

fn read_config_header<R: Read>(input: &mut R) -> Result<FusionConfig> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    let version = u32::from_le_bytes(word);
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    input.read_exact(&mut word).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    let len = u32::from_le_bytes(word) as usize;
    if len > 1 << 20 {
        return Err(Error::Format("implausible config length".into()));
    }
    let mut config_json = vec![0u8; len];
    input.read_exact(&mut config_json).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(serde_json::from_slice(&config_json)?)
}

/// Restores a model from a checkpoint. The stored precision must match `T`;
/// all tensors are loaded bit-exactly.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<FusionUNet<T>> {
    let file = File::open(path)?;
    let mut input = BufReader::new(file);
    let config = read_config_header(&mut input)?;
    if config.precision != T::DTYPE {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint precision {} does not match requested {}",
            config.precision,
            T::DTYPE
        )));
    }
    let model: FusionUNet<T> = build(&config, 0)?;
    let state = model.state();
    let mut word = [0u8; 4];
    input.read_exact(&mut word).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    let n = u32::from_le_bytes(word) as usize;
    if n != state.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {n} tensors, model has {}",
            state.len()
        )));
    }
    for (name, target) in &state {
        let loaded: Tensor<T> = tensorio::read_tensor(&mut input)?;
        if loaded.shape() != target.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {name}: shape {:?} in file, {:?} in model",
                loaded.shape(),
                target.shape()
            )));
        }
        target.set_data(&loaded.data());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tempfile::tempdir;

    fn rand_input(config: &FusionConfig, n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel = n * config.in_channels * config.input_side * config.input_side;
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(data, &[n, config.in_channels, config.input_side, config.input_side])
            .unwrap()
    }

    fn f64_config(base_width: usize, side: usize) -> FusionConfig {
        FusionConfig {
            base_width,
            input_side: side,
            precision: Dtype::F64,
            ..Default::default()
        }
    }

    #[test]
    fn desk_config_builds_and_runs() {
        let config = f64_config(8, 32);
        let model: FusionUNet<f64> = build(&config, 1).unwrap();
        let x = rand_input(&config, 2, 2);
        let y = model.forward(&x, NormMode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 2, 32, 32]);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pyramid_shapes_follow_halve_double_rule() {
        let config = f64_config(8, 64);
        let model: FusionUNet<f64> = build(&config, 1).unwrap();
        let x = rand_input(&config, 1, 3);
        let p = model.encode(&x, NormMode::Train).unwrap();
        assert_eq!(p.levels[0].shape(), &[1, 8, 64, 64]);
        assert_eq!(p.levels[1].shape(), &[1, 16, 32, 32]);
        assert_eq!(p.levels[2].shape(), &[1, 32, 16, 16]);
        assert_eq!(p.levels[3].shape(), &[1, 64, 8, 8]);
        assert_eq!(p.bottleneck.shape(), &[1, 128, 4, 4]);
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let config = f64_config(8, 32);
        let a: FusionUNet<f64> = build(&config, 9).unwrap();
        let b: FusionUNet<f64> = build(&config, 9).unwrap();
        for ((_, ta), (_, tb)) in a.state().iter().zip(b.state().iter()) {
            assert_eq!(*ta.data(), *tb.data());
        }
        let c: FusionUNet<f64> = build(&config, 10).unwrap();
        let differs = a
            .state()
            .iter()
            .zip(c.state().iter())
            .any(|((_, ta), (_, tc))| *ta.data() != *tc.data());
        assert!(differs);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let config = f64_config(8, 32);
        let model: FusionUNet<f64> = build(&config, 1).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 3, 64, 64]);
        assert!(model.forward(&x, NormMode::Train).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(FusionConfig { input_side: 100, ..Default::default() }.validate().is_err());
        assert!(FusionConfig { base_width: 6, ..Default::default() }.validate().is_err());
        assert!(FusionConfig { fuse_stack: 0, ..Default::default() }.validate().is_err());
        // Precision mismatch caught at build time.
        assert!(build::<f64>(&FusionConfig::default(), 0).is_err());
    }

    #[test]
    fn no_fusion_skips_are_raw_encoder_outputs() {
        let config = FusionConfig { fusion_mode: FusionMode::None, ..f64_config(8, 32) };
        let model: FusionUNet<f64> = build(&config, 4).unwrap();
        let x = rand_input(&config, 1, 5);
        let p = model.encode(&x, NormMode::Train).unwrap();
        let fused = model.fuse(&p, NormMode::Train).unwrap();
        for lvl in 0..4 {
            assert_eq!(*fused.levels[lvl].data(), *p.levels[lvl].data());
        }
    }

    #[test]
    fn group_fuse_component_param_count() {
        // The C=64 DownFuse grouped conv contributes exactly 4,736 params.
        let config = f64_config(64, 224);
        let model: FusionUNet<f64> = build(&config, 0).unwrap();
        let state = model.state();
        let w = state
            .iter()
            .find(|(name, _)| name == "fuse1.down1.group_conv.weight")
            .map(|(_, t)| t.numel())
            .unwrap();
        let b = state
            .iter()
            .find(|(name, _)| name == "fuse1.down1.group_conv.bias")
            .map(|(_, t)| t.numel())
            .unwrap();
        assert_eq!(w + b, 4_736);
    }

    #[test]
    fn full_scale_costs_sit_in_reference_bands() {
        let config = FusionConfig::default();
        let model: FusionUNet<f32> = build(&config, 0).unwrap();
        let params = model.count_params() as f64 / 1e6;
        assert!(
            (params - REFERENCE_PARAMS_M).abs() <= PARAMS_BAND * REFERENCE_PARAMS_M,
            "params {params}M outside ±20% of {REFERENCE_PARAMS_M}M"
        );
        let flops = model.count_flops(1) as f64 / 1e9;
        assert!(
            (flops - REFERENCE_FLOPS_G).abs() <= FLOPS_BAND * REFERENCE_FLOPS_G,
            "flops {flops}G outside ±25% of {REFERENCE_FLOPS_G}G"
        );
    }

    #[test]
    fn pool_conv_variant_costs_strictly_more() {
        let base = FusionConfig::default();
        let pool = FusionConfig { resample_mode: ResampleMode::PoolConv, ..base.clone() };
        let m_base: FusionUNet<f32> = build(&base, 0).unwrap();
        let m_pool: FusionUNet<f32> = build(&pool, 0).unwrap();
        assert!(m_pool.count_params() > m_base.count_params());
        assert!(m_pool.count_flops(1) > m_base.count_flops(1));
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.funw");
        let config = f64_config(8, 32);
        let model: FusionUNet<f64> = build(&config, 7).unwrap();
        let x = rand_input(&config, 1, 8);
        // Train-mode pass mutates running stats before saving.
        model.forward(&x, NormMode::Train).unwrap();
        let logits = model.forward(&x, NormMode::Eval).unwrap();

        save_checkpoint(&model, &path).unwrap();
        let restored: FusionUNet<f64> = load_checkpoint(&path).unwrap();
        let logits2 = restored.forward(&x, NormMode::Eval).unwrap();
        assert_eq!(*logits.data(), *logits2.data());
    }

    #[test]
    fn checkpoint_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.funw");
        let config = f64_config(8, 32);
        let model: FusionUNet<f64> = build(&config, 7).unwrap();
        save_checkpoint(&model, &path).unwrap();

        // Cross-precision load rejected.
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::CheckpointMismatch(_))));

        // Truncation is a clean error.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 17]).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());

        // Corrupt magic rejected.
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        std::fs::write(&path, &corrupt).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Format(_))));
    }
}
