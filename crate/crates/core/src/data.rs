//! Synthetic pathology-style datasets, augmentation, and the on-disk
//! dataset layout (images/NNNN.ppm, masks/NNNN.pgm, manifest.json).

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageio;
use crate::real::Real;
use crate::tensor::Tensor;

/// Integer label mask. Shape is (H, W) for single samples or (N, H, W) for
/// batches; values lie in [0, n_classes).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<u32>,
}

impl Mask {
    pub fn new(data: Vec<u32>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "mask",
                format!("shape {:?} does not describe {} labels", shape, data.len()),
            ));
        }
        Ok(Mask { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Stacks single-sample (H,W) masks into an (N,H,W) batch.
    pub fn stack(masks: &[&Mask]) -> Result<Mask> {
        let first = masks.first().ok_or_else(|| Error::invalid("mask", "empty batch"))?;
        let (h, w) = match first.shape() {
            [h, w] => (*h, *w),
            other => return Err(Error::shape("mask", format!("expected H×W, got {other:?}"))),
        };
        let mut data = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if m.shape() != [h, w] {
                return Err(Error::shape("mask", "inconsistent shapes in batch"));
            }
            data.extend_from_slice(m.data());
        }
        Mask::new(data, &[masks.len(), h, w])
    }

    pub fn class_histogram(&self, n_classes: usize) -> Vec<usize> {
        let mut hist = vec![0usize; n_classes];
        for &v in &self.data {
            hist[v as usize] += 1;
        }
        hist
    }
}

/// One image/mask pair. Image values lie in [0,1] with shape (C, S, S);
/// the mask is (S, S).
#[derive(Clone)]
pub struct SegSample<T: Real> {
    pub image: Tensor<T>,
    pub mask: Mask,
}

impl<T: Real> SegSample<T> {
    pub fn new(image: Tensor<T>, mask: Mask, n_classes: usize) -> Result<Self> {
        let shape = image.shape();
        if shape.len() != 3 {
            return Err(Error::shape("seg_sample", format!("image must be C×H×W, got {shape:?}")));
        }
        if mask.shape() != [shape[1], shape[2]] {
            return Err(Error::shape(
                "seg_sample",
                format!("mask {:?} for image {:?}", mask.shape(), shape),
            ));
        }
        if mask.max_label() as usize >= n_classes {
            return Err(Error::invalid(
                "seg_sample",
                format!("label {} out of range for {n_classes} classes", mask.max_label()),
            ));
        }
        Ok(SegSample { image, mask })
    }
}

/// Geometry style of the generated structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthStyle {
    /// Many small dense elliptical blobs.
    Nuclei,
    /// A few ring structures.
    Glands,
}

/// Parameters of the synthetic dataset generator. Generation is a pure
/// function of (spec, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub style: SynthStyle,
    pub side: usize,
    /// Inclusive object-count range; scaled at generation time relative to
    /// the 64×64 reference area.
    pub min_objects: usize,
    pub max_objects: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            style: SynthStyle::Nuclei,
            side: 64,
            min_objects: 10,
            max_objects: 40,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.min_objects > self.max_objects || !(0.0..=0.5).contains(&self.noise)
        {
            return Err(Error::InvalidConfig(format!("invalid synth spec: {self:?}")));
        }
        Ok(())
    }
}

/// Quantizes to the 8-bit grid so that writing a sample as PPM and reading
/// it back is lossless.
fn q8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Generates `n` samples. Object counts and radii follow the spec's ranges
/// on a 64×64 canvas and scale with area for other sides.
pub fn generate_dataset<T: Real>(spec: &SynthSpec, n: usize) -> Result<Vec<SegSample<T>>> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(n);
    for idx in 0..n {
        // Independent per-sample stream: generation order and worker count
        // cannot change the content.
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed ^ (idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        samples.push(generate_sample(spec, &mut rng)?);
    }
    Ok(samples)
}

fn generate_sample<T: Real>(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<SegSample<T>> {
    let s = spec.side;
    let area_scale = (s * s) as f64 / (64.0 * 64.0);
    let mut mask = vec![0u32; s * s];
    // Pathology-like palette: light pink background, dark violet structures.
    let bg = [0.85, 0.72, 0.80];
    let fg = [0.45, 0.25, 0.55];
    let mut image = vec![0.0f64; 3 * s * s];
    for c in 0..3 {
        for p in 0..s * s {
            image[c * s * s + p] = bg[c];
        }
    }

    match spec.style {
        SynthStyle::Nuclei => {
            let lo = ((spec.min_objects as f64) * area_scale).round().max(0.0) as usize;
            let hi = ((spec.max_objects as f64) * area_scale).round().max(lo as f64) as usize;
            let count = rng.gen_range(lo..=hi);
            for _ in 0..count {
                let cx = rng.gen_range(0.0..s as f64);
                let cy = rng.gen_range(0.0..s as f64);
                let rx = rng.gen_range(2.0..=6.0);
                let ry = rng.gen_range(2.0..=6.0);
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let shade: f64 = rng.gen_range(-0.08..0.08);
                paint_ellipse(&mut mask, &mut image, s, cx, cy, rx, ry, angle, &fg, shade);
            }
        }
        SynthStyle::Glands => {
            let count = rng.gen_range(2..=5usize);
            for _ in 0..count {
                let cx = rng.gen_range(0.15 * s as f64..0.85 * s as f64);
                let cy = rng.gen_range(0.15 * s as f64..0.85 * s as f64);
                let outer = rng.gen_range(0.10 * s as f64..0.22 * s as f64);
                let inner = outer * rng.gen_range(0.45..0.7);
                let shade: f64 = rng.gen_range(-0.08..0.08);
                paint_annulus(&mut mask, &mut image, s, cx, cy, inner, outer, &fg, shade);
            }
        }
    }

    // Per-pixel noise, then quantize to the 8-bit grid.
    for v in image.iter_mut() {
        *v = q8(*v + rng.gen_range(-spec.noise..=spec.noise));
    }

    let image_t = Tensor::from_vec(image.iter().map(|&v| T::from_f64(v)).collect(), &[3, s, s])?;
    SegSample::new(image_t, Mask::new(mask, &[s, s])?, 2)
}

#[allow(clippy::too_many_arguments)]
fn paint_ellipse(
    mask: &mut [u32],
    image: &mut [f64],
    s: usize,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    fg: &[f64; 3],
    shade: f64,
) {
    let (sin, cos) = angle.sin_cos();
    let reach = rx.max(ry).ceil() as isize + 1;
    let (icx, icy) = (cx.round() as isize, cy.round() as isize);
    for y in (icy - reach).max(0)..(icy + reach + 1).min(s as isize) {
        for x in (icx - reach).max(0)..(icx + reach + 1).min(s as isize) {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = (dx * cos + dy * sin) / rx;
            let v = (-dx * sin + dy * cos) / ry;
            if u * u + v * v <= 1.0 {
                let p = y as usize * s + x as usize;
                mask[p] = 1;
                for c in 0..3 {
                    image[c * s * s + p] = fg[c] + shade;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn paint_annulus(
    mask: &mut [u32],
    image: &mut [f64],
    s: usize,
    cx: f64,
    cy: f64,
    inner: f64,
    outer: f64,
    fg: &[f64; 3],
    shade: f64,
) {
    let reach = outer.ceil() as isize + 1;
    let (icx, icy) = (cx.round() as isize, cy.round() as isize);
    for y in (icy - reach).max(0)..(icy + reach + 1).min(s as isize) {
        for x in (icx - reach).max(0)..(icx + reach + 1).min(s as isize) {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let r = (dx * dx + dy * dy).sqrt();
            if r >= inner && r <= outer {
                let p = y as usize * s + x as usize;
                mask[p] = 1;
                for c in 0..3 {
                    image[c * s * s + p] = fg[c] + shade;
                }
            }
        }
    }
}

// ── Augmentation ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    Identity,
    Horizontal,
    Vertical,
    Rot90,
    Rot180,
    Rot270,
}

impl Flip {
    pub const ALL: [Flip; 6] =
        [Flip::Identity, Flip::Horizontal, Flip::Vertical, Flip::Rot90, Flip::Rot180, Flip::Rot270];

    /// Source coordinates (y, x) that land at destination (y, x) on an
    /// s×s grid.
    fn source(&self, y: usize, x: usize, s: usize) -> (usize, usize) {
        let m = s - 1;
        match self {
            Flip::Identity => (y, x),
            Flip::Horizontal => (y, m - x),
            Flip::Vertical => (m - y, x),
            // Counterclockwise quarter turns: dst(y,x) = src(x, m-y) for 90°.
            Flip::Rot90 => (x, m - y),
            Flip::Rot180 => (m - y, m - x),
            Flip::Rot270 => (m - x, y),
        }
    }
}

/// Applies one uniformly chosen symmetry of the square to image and mask
/// identically.
pub fn augment<T: Real>(sample: &SegSample<T>, rng: &mut dyn RngCore) -> Result<SegSample<T>> {
    let flip = Flip::ALL[(rng.next_u32() % 6) as usize];
    apply_flip(sample, flip)
}

pub fn apply_flip<T: Real>(sample: &SegSample<T>, flip: Flip) -> Result<SegSample<T>> {
    let shape = sample.image.shape().to_vec();
    let (c, s) = (shape[0], shape[1]);
    if shape[1] != shape[2] {
        return Err(Error::shape("augment", "sample must be square"));
    }
    let src = sample.image.data();
    let mut img = vec![T::zero(); src.len()];
    let mut mask = vec![0u32; s * s];
    let msrc = sample.mask.data();
    for y in 0..s {
        for x in 0..s {
            let (sy, sx) = flip.source(y, x, s);
            for ch in 0..c {
                img[(ch * s + y) * s + x] = src[(ch * s + sy) * s + sx];
            }
            mask[y * s + x] = msrc[sy * s + sx];
        }
    }
    drop(src);
    Ok(SegSample {
        image: Tensor::from_vec(img, &shape)?,
        mask: Mask::new(mask, &[s, s])?,
    })
}

// ── Batching ─────────────────────────────────────────────────────────

/// Stacks samples into an (N,C,S,S) image tensor and an (N,S,S) mask.
pub fn batch<T: Real>(samples: &[&SegSample<T>]) -> Result<(Tensor<T>, Mask)> {
    let first = samples.first().ok_or_else(|| Error::invalid("batch", "empty batch"))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for s in samples {
        if s.image.shape() != shape {
            return Err(Error::shape("batch", "inconsistent image shapes"));
        }
        data.extend_from_slice(&s.image.data());
    }
    let images =
        Tensor::from_vec(data, &[samples.len(), shape[0], shape[1], shape[2]])?;
    let masks: Vec<&Mask> = samples.iter().map(|s| &s.mask).collect();
    Ok((images, Mask::stack(&masks)?))
}

// ── On-disk layout ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SynthSpec,
    pub n_samples: usize,
    pub n_classes: usize,
    pub sha256: Vec<String>,
}

/// Writes `images/NNNN.ppm`, `masks/NNNN.pgm` and `manifest.json`.
pub fn write_dataset<T: Real>(dir: &Path, spec: &SynthSpec, samples: &[SegSample<T>]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut hashes = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let img_path = dir.join("images").join(format!("{i:04}.ppm"));
        let mask_path = dir.join("masks").join(format!("{i:04}.pgm"));
        imageio::write_image(&img_path, &sample.image)?;
        imageio::write_mask(&mask_path, &sample.mask)?;
        let mut hasher = Sha256::new();
        hasher.update(fs::read(&img_path)?);
        hasher.update(fs::read(&mask_path)?);
        hashes.push(format!("{:x}", hasher.finalize()));
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        n_samples: samples.len(),
        n_classes: 2,
        sha256: hashes,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_dataset<T: Real>(dir: &Path) -> Result<Vec<SegSample<T>>> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let mut samples = Vec::with_capacity(manifest.n_samples);
    for i in 0..manifest.n_samples {
        let image = imageio::read_image(&dir.join("images").join(format!("{i:04}.ppm")))?;
        let mask = imageio::read_mask(
            &dir.join("masks").join(format!("{i:04}.pgm")),
            manifest.n_classes,
        )?;
        samples.push(SegSample::new(image, mask, manifest.n_classes)?);
    }
    Ok(samples)
}
