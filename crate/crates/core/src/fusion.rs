//! Skip-connection feature fusion: adjacency-preserving resampling, grouped
//! fusion convolutions, DownFuse/UpFuse units, and the two-round schedule.
//!
//! The reorganize step turns each 2×2 spatial block into four consecutive
//! channels — a lossless permutation — so that a grouped convolution mixing
//! exactly those channels fuses the formerly adjacent pixels. The schedule
//! runs fusion down the pyramid and back up, letting information from any
//! level reach any other.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Conv2d, ConvBnRelu, EcaLayer, Layer, NormMode};
use crate::error::{Error, Result};
use crate::ops::{add_weighted, bilinear_upsample2x, maxpool2d, names};
use crate::real::Real;
use crate::tensor::{dims4, Tensor};

/// Which fusion rounds the module runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    DownOnly,
    UpOnly,
    Both,
}

/// How a fuse unit brings the two pyramid levels to a common shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    ReorganizeGroupConv,
    PoolConv,
}

// ── Reorganize / inverse ─────────────────────────────────────────────

/// Space-to-depth permutation: out[n, 4c + 2dy + dx, i, j] =
/// in[n, c, 2i+dy, 2j+dx] for dy,dx ∈ {0,1}. Each channel's four spatial
/// sub-samples stay channel-adjacent; no arithmetic, no information loss.
pub fn reorganize<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n_batch, c, h, w) = dims4(names::REORGANIZE, x.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            names::REORGANIZE,
            format!("spatial dims must be even, got {h}×{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for n in 0..n_batch {
        for ch in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let oc = 4 * ch + 2 * dy + dx;
                    for i in 0..oh {
                        let src_row = ((n * c + ch) * h + 2 * i + dy) * w;
                        let dst_row = ((n * 4 * c + oc) * oh + i) * ow;
                        for j in 0..ow {
                            out[dst_row + j] = xd[src_row + 2 * j + dx];
                        }
                    }
                }
            }
        }
    }
    drop(xd);
    Tensor::from_op(
        out,
        vec![n_batch, 4 * c, oh, ow],
        names::REORGANIZE,
        vec![x.clone()],
        Box::new(move |grad_out, _out, inputs| {
            let mut dx = vec![T::zero(); inputs[0].numel()];
            scatter_inverse(grad_out, &mut dx, n_batch, c, h, w);
            inputs[0].accumulate_grad_owned(dx);
        }),
    )
}

/// Depth-to-space: the exact inverse permutation of [`reorganize`].
pub fn inverse_reorganize<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n_batch, c4, h, w) = dims4(names::INVERSE_REORGANIZE, x.shape())?;
    if c4 % 4 != 0 {
        return Err(Error::shape(
            names::INVERSE_REORGANIZE,
            format!("channel count {c4} not divisible by 4"),
        ));
    }
    let c = c4 / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    scatter_inverse(&xd, &mut out, n_batch, c, oh, ow);
    drop(xd);
    Tensor::from_op(
        out,
        vec![n_batch, c, oh, ow],
        names::INVERSE_REORGANIZE,
        vec![x.clone()],
        Box::new(move |grad_out, _out, inputs| {
            // Gradient of the inverse permutation is the forward gather.
            let mut dx = vec![T::zero(); inputs[0].numel()];
            gather_forward(grad_out, &mut dx, n_batch, c, oh, ow);
            inputs[0].accumulate_grad_owned(dx);
        }),
    )
}

/// dst (N,C,H,W) ← src (N,4C,H/2,W/2) under the inverse permutation.
fn scatter_inverse<T: Real>(src: &[T], dst: &mut [T], n_batch: usize, c: usize, h: usize, w: usize) {
    let (sh, sw) = (h / 2, w / 2);
    for n in 0..n_batch {
        for ch in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let sc = 4 * ch + 2 * dy + dx;
                    for i in 0..sh {
                        let src_row = ((n * 4 * c + sc) * sh + i) * sw;
                        let dst_row = ((n * c + ch) * h + 2 * i + dy) * w;
                        for j in 0..sw {
                            dst[dst_row + 2 * j + dx] = src[src_row + j];
                        }
                    }
                }
            }
        }
    }
}

/// dst (N,4C,H/2,W/2) ← src (N,C,H,W) under the forward permutation.
fn gather_forward<T: Real>(src: &[T], dst: &mut [T], n_batch: usize, c: usize, h: usize, w: usize) {
    let (sh, sw) = (h / 2, w / 2);
    for n in 0..n_batch {
        for ch in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let dc = 4 * ch + 2 * dy + dx;
                    for i in 0..sh {
                        let dst_row = ((n * 4 * c + dc) * sh + i) * sw;
                        let src_row = ((n * c + ch) * h + 2 * i + dy) * w;
                        for j in 0..sw {
                            dst[dst_row + j] = src[src_row + 2 * j + dx];
                        }
                    }
                }
            }
        }
    }
}

// ── Grouped fusion convolutions ──────────────────────────────────────

/// Builds the DownFuse grouped convolution for base channel count `c`:
/// 4C → 2C with C groups, so each group's 3×3 kernels mix exactly the four
/// formerly adjacent pixels of one original channel.
pub fn group_fuse_down_conv<T: Real>(rng: &mut ChaCha8Rng, c: usize) -> Conv2d<T> {
    Conv2d::new(rng, 4 * c, 2 * c, 3, 1, 1, c)
}

/// Builds the UpFuse grouped convolution: 2C → 4C with C groups; its output
/// feeds [`inverse_reorganize`].
pub fn group_fuse_up_conv<T: Real>(rng: &mut ChaCha8Rng, c: usize) -> Conv2d<T> {
    Conv2d::new(rng, 2 * c, 4 * c, 3, 1, 1, c)
}

/// N×4C×H×W → N×2C×H×W through a grouped conv with C groups.
pub fn group_fuse_down<T: Real>(x: &Tensor<T>, conv: &Conv2d<T>) -> Result<Tensor<T>> {
    let groups = conv.params.groups;
    if x.shape()[1] != 4 * groups || conv.params.out_channels() != 2 * groups {
        return Err(Error::shape(
            "group_fuse_down",
            format!("input {:?} incompatible with {} groups", x.shape(), groups),
        ));
    }
    conv.forward(x)
}

/// N×2C×H×W → N×4C×H×W through a grouped conv with C groups.
pub fn group_fuse_up<T: Real>(x: &Tensor<T>, conv: &Conv2d<T>) -> Result<Tensor<T>> {
    let groups = conv.params.groups;
    if x.shape()[1] != 2 * groups || conv.params.out_channels() != 4 * groups {
        return Err(Error::shape(
            "group_fuse_up",
            format!("input {:?} incompatible with {} groups", x.shape(), groups),
        ));
    }
    conv.forward(x)
}

// ── Fuse units ───────────────────────────────────────────────────────

enum Resample<T: Real> {
    /// reorganize → grouped conv (down path).
    GroupDown(Conv2d<T>),
    /// grouped conv → inverse reorganize (up path).
    GroupUp(Conv2d<T>),
    /// maxpool → plain conv C→2C (down-path ablation arm).
    PoolConv(Conv2d<T>),
    /// bilinear upsample → plain conv 2C→C (up-path ablation arm).
    UpsampleConv(Conv2d<T>),
}

/// One directional fusion unit over an adjacent pyramid pair. Resamples one
/// operand to the other's shape, combines by learnable weighted sum, then
/// applies a 3×3 conv+norm+relu and an ECA gate.
pub struct FuseUnit<T: Real> {
    resample: Resample<T>,
    pub alpha: Tensor<T>,
    pub beta: Tensor<T>,
    pub post: ConvBnRelu<T>,
    pub eca: EcaLayer<T>,
}

impl<T: Real> FuseUnit<T> {
    /// Down unit over the pair (C, 2C): output shape is the deep member's.
    pub fn down(rng: &mut ChaCha8Rng, c: usize, resample: ResampleMode) -> Self {
        let resample = match resample {
            ResampleMode::ReorganizeGroupConv => Resample::GroupDown(group_fuse_down_conv(rng, c)),
            ResampleMode::PoolConv => Resample::PoolConv(Conv2d::new(rng, c, 2 * c, 3, 1, 1, 1)),
        };
        FuseUnit {
            resample,
            alpha: Tensor::param(vec![T::from_f64(0.5)], &[1]).unwrap(),
            beta: Tensor::param(vec![T::from_f64(0.5)], &[1]).unwrap(),
            post: ConvBnRelu::new(rng, 2 * c, 2 * c),
            eca: EcaLayer::new(rng, 2 * c),
        }
    }

    /// Up unit over the pair (2C, C): output shape is the shallow member's.
    pub fn up(rng: &mut ChaCha8Rng, c: usize, resample: ResampleMode) -> Self {
        let resample = match resample {
            ResampleMode::ReorganizeGroupConv => Resample::GroupUp(group_fuse_up_conv(rng, c)),
            ResampleMode::PoolConv => Resample::UpsampleConv(Conv2d::new(rng, 2 * c, c, 3, 1, 1, 1)),
        };
        FuseUnit {
            resample,
            alpha: Tensor::param(vec![T::from_f64(0.5)], &[1]).unwrap(),
            beta: Tensor::param(vec![T::from_f64(0.5)], &[1]).unwrap(),
            post: ConvBnRelu::new(rng, c, c),
            eca: EcaLayer::new(rng, c),
        }
    }

    /// y = ECA(ConvBnRelu(α·resample(t_shallow) + β·t_deep)).
    pub fn forward_down(
        &self,
        t_shallow: &Tensor<T>,
        t_deep: &Tensor<T>,
        mode: NormMode,
    ) -> Result<Tensor<T>> {
        let resampled = match &self.resample {
            Resample::GroupDown(conv) => group_fuse_down(&reorganize(t_shallow)?, conv)?,
            Resample::PoolConv(conv) => conv.forward(&maxpool2d(t_shallow)?)?,
            _ => return Err(Error::invalid("down_fuse", "unit was built for the up direction")),
        };
        if resampled.shape() != t_deep.shape() {
            return Err(Error::shape(
                "down_fuse",
                format!("resampled {:?} vs deep {:?}", resampled.shape(), t_deep.shape()),
            ));
        }
        let combined = add_weighted(&resampled, t_deep, &self.alpha, &self.beta)?;
        self.eca.forward(&self.post.forward(&combined, mode)?)
    }

    /// y = ECA(ConvBnRelu(α·resample(t_deep) + β·t_shallow)).
    pub fn forward_up(
        &self,
        t_deep: &Tensor<T>,
        t_shallow: &Tensor<T>,
        mode: NormMode,
    ) -> Result<Tensor<T>> {
        let resampled = match &self.resample {
            Resample::GroupUp(conv) => inverse_reorganize(&group_fuse_up(t_deep, conv)?)?,
            Resample::UpsampleConv(conv) => conv.forward(&bilinear_upsample2x(t_deep)?)?,
            _ => return Err(Error::invalid("up_fuse", "unit was built for the down direction")),
        };
        if resampled.shape() != t_shallow.shape() {
            return Err(Error::shape(
                "up_fuse",
                format!("resampled {:?} vs shallow {:?}", resampled.shape(), t_shallow.shape()),
            ));
        }
        let combined = add_weighted(&resampled, t_shallow, &self.alpha, &self.beta)?;
        self.eca.forward(&self.post.forward(&combined, mode)?)
    }
}

impl<T: Real> Layer<T> for FuseUnit<T> {
    fn collect_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        match &self.resample {
            Resample::GroupDown(c) | Resample::GroupUp(c) => {
                c.collect_state(&format!("{prefix}.group_conv"), out)
            }
            Resample::PoolConv(c) | Resample::UpsampleConv(c) => {
                c.collect_state(&format!("{prefix}.resample_conv"), out)
            }
        }
        out.push((format!("{prefix}.alpha"), self.alpha.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
        self.post.collect_state(&format!("{prefix}.post"), out);
        self.eca.collect_state(&format!("{prefix}.eca"), out);
    }
}

// ── Feature pyramid ──────────────────────────────────────────────────

/// The four encoder outputs T1..T4 plus the bottleneck. Consecutive levels
/// double channels and halve spatial dims; the bottleneck continues the
/// progression below T4 and passes through fusion untouched.
pub struct FeaturePyramid<T: Real> {
    pub levels: [Tensor<T>; 4],
    pub bottleneck: Tensor<T>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn new(levels: [Tensor<T>; 4], bottleneck: Tensor<T>) -> Result<Self> {
        for i in 1..4 {
            let prev = levels[i - 1].shape();
            let cur = levels[i].shape();
            if cur[0] != prev[0] || cur[1] != 2 * prev[1] || 2 * cur[2] != prev[2] || 2 * cur[3] != prev[3]
            {
                return Err(Error::shape(
                    "feature_pyramid",
                    format!("level {} {:?} does not follow level {} {:?}", i + 1, cur, i, prev),
                ));
            }
        }
        let t4 = levels[3].shape();
        let b = bottleneck.shape();
        if b[0] != t4[0] || b[1] != 2 * t4[1] || 2 * b[2] != t4[2] || 2 * b[3] != t4[3] {
            return Err(Error::shape(
                "feature_pyramid",
                format!("bottleneck {b:?} does not follow deepest level {t4:?}"),
            ));
        }
        Ok(FeaturePyramid { levels, bottleneck })
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|t| t.shape().to_vec()).collect()
    }
}

// ── FuseBlock and the module schedule ────────────────────────────────

/// One two-round fusion stage: up to 3 DownFuse units for the pairs
/// (T1,T2), (T2,T3), (T3,T4) and 3 UpFuse units for (T4,T3), (T3,T2),
/// (T2,T1), per the configured mode.
pub struct FuseBlock<T: Real> {
    pub down_units: Vec<FuseUnit<T>>,
    pub up_units: Vec<FuseUnit<T>>,
}

impl<T: Real> FuseBlock<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        base_width: usize,
        fusion_mode: FusionMode,
        resample: ResampleMode,
    ) -> Self {
        let widths = [base_width, 2 * base_width, 4 * base_width];
        let down_units = match fusion_mode {
            FusionMode::DownOnly | FusionMode::Both => {
                widths.iter().map(|&c| FuseUnit::down(rng, c, resample)).collect()
            }
            _ => Vec::new(),
        };
        let up_units = match fusion_mode {
            FusionMode::UpOnly | FusionMode::Both => {
                widths.iter().rev().map(|&c| FuseUnit::up(rng, c, resample)).collect()
            }
            _ => Vec::new(),
        };
        FuseBlock { down_units, up_units }
    }

    /// Sequential two-round schedule; every stage consumes the most recently
    /// updated neighbor, so information relays across the whole pyramid.
    pub fn forward(&self, p: &FeaturePyramid<T>, mode: NormMode) -> Result<FeaturePyramid<T>> {
        let mut t = p.levels.clone();
        if !self.down_units.is_empty() {
            t[1] = self.down_units[0].forward_down(&t[0], &t[1], mode)?;
            t[2] = self.down_units[1].forward_down(&t[1], &t[2], mode)?;
            t[3] = self.down_units[2].forward_down(&t[2], &t[3], mode)?;
        }
        if !self.up_units.is_empty() {
            t[2] = self.up_units[0].forward_up(&t[3], &t[2], mode)?;
            t[1] = self.up_units[1].forward_up(&t[2], &t[1], mode)?;
            t[0] = self.up_units[2].forward_up(&t[1], &t[0], mode)?;
        }
        FeaturePyramid::new(t, p.bottleneck.clone())
    }
}

impl<T: Real> Layer<T> for FuseBlock<T> {
    fn collect_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (i, u) in self.down_units.iter().enumerate() {
            u.collect_state(&format!("{prefix}.down{}", i + 1), out);
        }
        for (i, u) in self.up_units.iter().enumerate() {
            u.collect_state(&format!("{prefix}.up{}", i + 1), out);
        }
    }
}

/// Applies a stack of FuseBlocks in order; an empty stack is the identity.
pub fn fusion_module_forward<T: Real>(
    p: &FeaturePyramid<T>,
    blocks: &[FuseBlock<T>],
    mode: NormMode,
) -> Result<FeaturePyramid<T>> {
    let mut current = FeaturePyramid::new(p.levels.clone(), p.bottleneck.clone())?;
    for block in blocks {
        current = block.forward(&current, mode)?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum_all;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    fn pyramid(rng: &mut ChaCha8Rng, c: usize, s: usize) -> FeaturePyramid<f64> {
        FeaturePyramid::new(
            [
                rand_tensor(rng, &[1, c, s, s]),
                rand_tensor(rng, &[1, 2 * c, s / 2, s / 2]),
                rand_tensor(rng, &[1, 4 * c, s / 4, s / 4]),
                rand_tensor(rng, &[1, 8 * c, s / 8, s / 8]),
            ],
            rand_tensor(rng, &[1, 16 * c, s / 16, s / 16]),
        )
        .unwrap()
    }

    #[test]
    fn reorganize_single_block() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let y = reorganize(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 1, 1]);
        assert_eq!(*y.data(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn reorganize_channel_blocks_are_contiguous() {
        // Two input channels: channel 0's sub-samples land in output
        // channels 0–3, channel 1's in 4–7.
        let mut r = rng();
        let x = rand_tensor(&mut r, &[1, 2, 4, 4]);
        let y = reorganize(&x).unwrap();
        assert_eq!(y.shape(), &[1, 8, 2, 2]);
        let (xd, yd) = (x.data(), y.data());
        for ch in 0..2usize {
            for dy in 0..2usize {
                for dx in 0..2usize {
                    let oc = 4 * ch + 2 * dy + dx;
                    for i in 0..2 {
                        for j in 0..2 {
                            let got = yd[(oc * 2 + i) * 2 + j];
                            let want = xd[(ch * 4 + 2 * i + dy) * 4 + 2 * j + dx];
                            assert_eq!(got, want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn roundtrip_is_bitwise_identity() {
        let mut r = rng();
        for &(c, h, w) in &[(1usize, 2usize, 2usize), (3, 4, 6), (4, 8, 8), (2, 6, 2)] {
            let x = rand_tensor(&mut r, &[2, c, h, w]);
            let y = inverse_reorganize(&reorganize(&x).unwrap()).unwrap();
            assert_eq!(*x.data(), *y.data());
            let x4 = rand_tensor(&mut r, &[2, 4 * c, h, w]);
            let y4 = reorganize(&inverse_reorganize(&x4).unwrap()).unwrap();
            assert_eq!(*x4.data(), *y4.data());
        }
    }

    #[test]
    fn inverse_places_channels_as_patch() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 4, 1, 1]).unwrap();
        let y = inverse_reorganize(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(*y.data(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn reorganize_rejects_odd_dims_and_inverse_rejects_bad_channels() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(reorganize(&x).is_err());
        let x = Tensor::<f64>::zeros(&[1, 6, 2, 2]);
        assert!(inverse_reorganize(&x).is_err());
    }

    #[test]
    fn reorganize_gradient_is_inverse_permutation() {
        let mut r = rng();
        let x = Tensor::param(rand_tensor(&mut r, &[1, 2, 4, 4]).to_vec(), &[1, 2, 4, 4]).unwrap();
        let y = reorganize(&x).unwrap();
        let s = sum_all(&y).unwrap();
        s.backward().unwrap();
        // Sum is permutation-invariant: gradient is all ones.
        assert!(x.grad().unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn group_fuse_param_count_closed_form() {
        let mut r = rng();
        let conv = group_fuse_down_conv::<f64>(&mut r, 64);
        let n_params: usize = conv.parameters().iter().map(|t| t.numel()).sum();
        assert_eq!(n_params, 64 * (2 * 4 * 3 * 3) + 128);
        assert_eq!(n_params, 4736);
    }

    #[test]
    fn group_fuse_down_shape_and_isolation() {
        let mut r = rng();
        let c = 4;
        let conv = group_fuse_down_conv::<f64>(&mut r, c);
        let x = rand_tensor(&mut r, &[1, 4 * c, 6, 6]);
        let y = group_fuse_down(&x, &conv).unwrap();
        assert_eq!(y.shape(), &[1, 2 * c, 6, 6]);

        // Zeroing group 0's four input channels zeroes exactly output 0–1.
        let mut data = x.to_vec();
        for v in data.iter_mut().take(4 * 36) {
            *v = 0.0;
        }
        let xz = Tensor::from_vec(data, &[1, 4 * c, 6, 6]).unwrap();
        let yz = group_fuse_down(&xz, &conv).unwrap();
        let (a, b) = (y.data(), yz.data());
        for ch in 0..2 * c {
            for p in 0..36 {
                let idx = ch * 36 + p;
                if ch >= 2 {
                    assert_eq!(a[idx], b[idx], "cross-group sensitivity at channel {ch}");
                }
            }
        }
    }

    #[test]
    fn group_fuse_up_shape() {
        let mut r = rng();
        let conv = group_fuse_up_conv::<f64>(&mut r, 4);
        let x = rand_tensor(&mut r, &[1, 8, 6, 6]);
        let y = group_fuse_up(&x, &conv).unwrap();
        assert_eq!(y.shape(), &[1, 16, 6, 6]);
        // Wrong channel arithmetic rejected.
        let bad = rand_tensor(&mut r, &[1, 12, 6, 6]);
        assert!(group_fuse_up(&bad, &conv).is_err());
    }

    #[test]
    fn down_fuse_shapes_and_alpha_zero_blocks_shallow() {
        let mut r = rng();
        let unit = FuseUnit::<f64>::down(&mut r, 4, ResampleMode::ReorganizeGroupConv);
        unit.alpha.set_data(&[0.0]);
        let shallow = Tensor::param(rand_tensor(&mut r, &[1, 4, 8, 8]).to_vec(), &[1, 4, 8, 8]).unwrap();
        let deep = rand_tensor(&mut r, &[1, 8, 4, 4]);
        let y = unit.forward_down(&shallow, &deep, NormMode::Train).unwrap();
        assert_eq!(y.shape(), deep.shape());

        // α = 0: output independent of the shallow operand — zero gradient.
        let s = sum_all(&y).unwrap();
        s.backward().unwrap();
        assert!(shallow.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn up_fuse_zero_mixing_zero_response() {
        let mut r = rng();
        let unit = FuseUnit::<f64>::up(&mut r, 4, ResampleMode::ReorganizeGroupConv);
        unit.alpha.set_data(&[0.0]);
        unit.beta.set_data(&[0.0]);
        let deep = rand_tensor(&mut r, &[1, 8, 4, 4]);
        let shallow = rand_tensor(&mut r, &[1, 4, 8, 8]);
        // Combined map is zero; conv bias is zero-initialized, BN keeps it
        // zero, so the pre-ECA map and thus the output are exactly zero.
        let y = unit.forward_up(&deep, &shallow, NormMode::Train).unwrap();
        assert_eq!(y.shape(), shallow.shape());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_block_preserves_pyramid_shapes() {
        let mut r = rng();
        let p = pyramid(&mut r, 4, 16);
        for mode in [FusionMode::Both, FusionMode::DownOnly, FusionMode::UpOnly] {
            let fb = FuseBlock::new(&mut r, 4, mode, ResampleMode::ReorganizeGroupConv);
            let out = fb.forward(&p, NormMode::Train).unwrap();
            assert_eq!(out.shapes(), p.shapes());
        }
    }

    #[test]
    fn down_only_leaves_t1_bit_identical() {
        let mut r = rng();
        let p = pyramid(&mut r, 4, 16);
        let fb = FuseBlock::new(&mut r, 4, FusionMode::DownOnly, ResampleMode::ReorganizeGroupConv);
        let out = fb.forward(&p, NormMode::Train).unwrap();
        assert_eq!(*out.levels[0].data(), *p.levels[0].data());
        assert_eq!(out.levels[0].id(), p.levels[0].id());
    }

    #[test]
    fn up_only_leaves_t4_bit_identical() {
        let mut r = rng();
        let p = pyramid(&mut r, 4, 16);
        let fb = FuseBlock::new(&mut r, 4, FusionMode::UpOnly, ResampleMode::ReorganizeGroupConv);
        let out = fb.forward(&p, NormMode::Train).unwrap();
        assert_eq!(*out.levels[3].data(), *p.levels[3].data());
    }

    #[test]
    fn relay_passes_perturbations_both_ways() {
        let mut r = rng();
        let p = pyramid(&mut r, 4, 16);
        let fb = FuseBlock::new(&mut r, 4, FusionMode::Both, ResampleMode::ReorganizeGroupConv);
        let base = fb.forward(&p, NormMode::Train).unwrap();

        // Perturb T1: T4' and all second-round outputs must move.
        let mut d = p.levels[0].to_vec();
        d[0] += 0.5;
        let p1 = FeaturePyramid::new(
            [
                Tensor::from_vec(d, p.levels[0].shape()).unwrap(),
                p.levels[1].clone(),
                p.levels[2].clone(),
                p.levels[3].clone(),
            ],
            p.bottleneck.clone(),
        )
        .unwrap();
        let out1 = fb.forward(&p1, NormMode::Train).unwrap();
        for lvl in 0..4 {
            let diff: f64 = out1.levels[lvl]
                .data()
                .iter()
                .zip(base.levels[lvl].data().iter())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff > 0.0, "perturbing T1 did not reach T{}", lvl + 1);
        }

        // Perturb T4: T1'' must move.
        let mut d = p.levels[3].to_vec();
        d[0] += 0.5;
        let p4 = FeaturePyramid::new(
            [
                p.levels[0].clone(),
                p.levels[1].clone(),
                p.levels[2].clone(),
                Tensor::from_vec(d, p.levels[3].shape()).unwrap(),
            ],
            p.bottleneck.clone(),
        )
        .unwrap();
        let out4 = fb.forward(&p4, NormMode::Train).unwrap();
        let diff: f64 = out4.levels[0]
            .data()
            .iter()
            .zip(base.levels[0].data().iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 0.0, "perturbing T4 did not reach T1");
    }

    #[test]
    fn empty_stack_is_identity_and_stack_composes() {
        let mut r = rng();
        let p = pyramid(&mut r, 4, 16);
        let out = fusion_module_forward(&p, &[], NormMode::Train).unwrap();
        for lvl in 0..4 {
            assert_eq!(*out.levels[lvl].data(), *p.levels[lvl].data());
        }
        let blocks = vec![
            FuseBlock::new(&mut r, 4, FusionMode::Both, ResampleMode::ReorganizeGroupConv),
            FuseBlock::new(&mut r, 4, FusionMode::Both, ResampleMode::ReorganizeGroupConv),
        ];
        let out2 = fusion_module_forward(&p, &blocks, NormMode::Train).unwrap();
        assert_eq!(out2.shapes(), p.shapes());
    }

    #[test]
    fn pool_conv_arm_matches_shapes_and_costs_more() {
        let mut r = rng();
        let c = 8;
        let grouped = FuseUnit::<f64>::down(&mut r, c, ResampleMode::ReorganizeGroupConv);
        let pooled = FuseUnit::<f64>::down(&mut r, c, ResampleMode::PoolConv);
        let shallow = rand_tensor(&mut r, &[1, c, 8, 8]);
        let deep = rand_tensor(&mut r, &[1, 2 * c, 4, 4]);
        let a = grouped.forward_down(&shallow, &deep, NormMode::Train).unwrap();
        let b = pooled.forward_down(&shallow, &deep, NormMode::Train).unwrap();
        assert_eq!(a.shape(), b.shape());

        let count = |u: &FuseUnit<f64>| -> usize { u.parameters().iter().map(|t| t.numel()).sum() };
        // Grouped resample: C·(2·4·9)+2C; plain conv: C·2C·9+2C — larger for C ≥ 2.
        assert!(count(&pooled) > count(&grouped));

        let up_grouped = FuseUnit::<f64>::up(&mut r, c, ResampleMode::ReorganizeGroupConv);
        let up_pooled = FuseUnit::<f64>::up(&mut r, c, ResampleMode::PoolConv);
        let au = up_grouped.forward_up(&deep, &shallow, NormMode::Train).unwrap();
        let bu = up_pooled.forward_up(&deep, &shallow, NormMode::Train).unwrap();
        assert_eq!(au.shape(), bu.shape());
        assert!(count(&up_pooled) > count(&up_grouped));
    }

    #[test]
    fn maxpool_is_not_invertible_counterexample() {
        // Two different inputs with the same pooled output, while reorganize
        // keeps them distinguishable.
        let a = Tensor::from_vec(vec![4.0, 1.0, 1.0, 1.0], &[1, 1, 2, 2]).unwrap();
        let b = Tensor::from_vec(vec![4.0, 2.0, 2.0, 2.0], &[1, 1, 2, 2]).unwrap();
        let pa = maxpool2d(&a).unwrap();
        let pb = maxpool2d(&b).unwrap();
        assert_eq!(*pa.data(), *pb.data());
        let ra = reorganize(&a).unwrap();
        let rb = reorganize(&b).unwrap();
        assert_ne!(*ra.data(), *rb.data());
    }
}
