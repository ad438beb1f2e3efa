//! Training losses over logits and integer masks. Each loss is a single
//! fused op with an analytic backward rule, covered by the gradient audit.

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::ops::{add_weighted, names, softmax_channels_raw};
use crate::real::Real;
use crate::tensor::{dims4, Tensor};

pub const DICE_SMOOTHING: f64 = 1e-5;

/// Loss selection for training configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    CrossEntropy,
    Dice,
    /// Cross entropy plus soft Dice.
    CeDice,
    Focal { gamma: f64 },
}

impl LossKind {
    pub fn compute<T: Real>(&self, logits: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
        match self {
            LossKind::CrossEntropy => ce_loss(logits, mask),
            LossKind::Dice => dice_loss(logits, mask),
            LossKind::CeDice => combined_loss(logits, mask),
            LossKind::Focal { gamma } => focal_loss(logits, mask, *gamma),
        }
    }
}

fn check_mask<T: Real>(op: &'static str, logits: &Tensor<T>, mask: &Mask) -> Result<(usize, usize, usize, usize)> {
    let (n, k, h, w) = dims4(op, logits.shape())?;
    if mask.shape() != [n, h, w] {
        return Err(Error::shape(
            op,
            format!("mask {:?} for logits {:?}", mask.shape(), logits.shape()),
        ));
    }
    if mask.max_label() as usize >= k {
        return Err(Error::invalid(
            op,
            format!("label {} out of range for {k} classes", mask.max_label()),
        ));
    }
    Ok((n, k, h, w))
}

/// Stable per-pixel log-softmax probabilities of the target class plus the
/// full softmax field.
fn softmax_and_logp<T: Real>(
    logits: &[T],
    labels: &[u32],
    n: usize,
    k: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>) {
    let probs = softmax_channels_raw(logits, n, k, plane, 1);
    let mut logp_t = vec![T::zero(); n * plane];
    for bn in 0..n {
        for p in 0..plane {
            let base = bn * k * plane + p;
            let mut maxv = T::neg_infinity();
            for c in 0..k {
                maxv = maxv.max(logits[base + c * plane]);
            }
            let mut denom = T::zero();
            for c in 0..k {
                denom += (logits[base + c * plane] - maxv).exp();
            }
            let t = labels[bn * plane + p] as usize;
            logp_t[bn * plane + p] = logits[base + t * plane] - maxv - denom.ln();
        }
    }
    (probs, logp_t)
}

/// Mean per-pixel cross entropy over log-softmax probabilities.
pub fn ce_loss<T: Real>(logits: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    let (n, k, h, w) = check_mask(names::CE_LOSS, logits, mask)?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let labels = mask.data().to_vec();
    let (probs, logp_t) = softmax_and_logp(&logits.data(), &labels, n, k, plane);
    let mut loss = T::zero();
    for &lp in &logp_t {
        loss -= lp;
    }
    loss = loss / T::from_f64(count);

    Tensor::from_op(
        vec![loss],
        vec![1],
        names::CE_LOSS,
        vec![logits.clone()],
        Box::new(move |grad_out, _out, inputs| {
            let g = grad_out[0] / T::from_f64(count);
            let mut dz = vec![T::zero(); inputs[0].numel()];
            for bn in 0..n {
                for p in 0..plane {
                    let base = bn * k * plane + p;
                    let t = labels[bn * plane + p] as usize;
                    for c in 0..k {
                        let indicator = if c == t { T::one() } else { T::zero() };
                        dz[base + c * plane] = (probs[base + c * plane] - indicator) * g;
                    }
                }
            }
            inputs[0].accumulate_grad_owned(dz);
        }),
    )
}

/// 1 − soft Dice over softmax probabilities, averaged across classes, with
/// smoothing in numerator and denominator. Lies in [0, 1].
pub fn dice_loss<T: Real>(logits: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    let (n, k, h, w) = check_mask(names::DICE_LOSS, logits, mask)?;
    let plane = h * w;
    let labels = mask.data().to_vec();
    let probs = softmax_channels_raw(&logits.data(), n, k, plane, 1);
    let eps = T::from_f64(DICE_SMOOTHING);

    // Per-class intersection and mass over the whole batch.
    let mut num = vec![eps; k];
    let mut den = vec![eps; k];
    for bn in 0..n {
        for p in 0..plane {
            let base = bn * k * plane + p;
            let t = labels[bn * plane + p] as usize;
            for c in 0..k {
                let pv = probs[base + c * plane];
                den[c] += pv;
                if c == t {
                    num[c] += pv + pv;
                    den[c] += T::one();
                }
            }
        }
    }
    let mut dice = T::zero();
    for c in 0..k {
        dice += num[c] / den[c];
    }
    let loss = T::one() - dice / T::from_f64(k as f64);

    Tensor::from_op(
        vec![loss],
        vec![1],
        names::DICE_LOSS,
        vec![logits.clone()],
        Box::new(move |grad_out, _out, inputs| {
            let g = grad_out[0];
            let inv_k = T::from_f64(1.0 / k as f64);
            let mut dz = vec![T::zero(); inputs[0].numel()];
            for bn in 0..n {
                for p in 0..plane {
                    let base = bn * k * plane + p;
                    let t = labels[bn * plane + p] as usize;
                    // dL/dp for each class at this pixel, then the softmax
                    // chain rule within the pixel.
                    let mut dot = T::zero();
                    let mut dp = vec![T::zero(); k];
                    for c in 0..k {
                        let y = if c == t { T::one() } else { T::zero() };
                        let d = (num[c] - (y + y) * den[c]) / (den[c] * den[c]) * inv_k;
                        dp[c] = d;
                        dot += probs[base + c * plane] * d;
                    }
                    for c in 0..k {
                        let pv = probs[base + c * plane];
                        dz[base + c * plane] = pv * (dp[c] - dot) * g;
                    }
                }
            }
            inputs[0].accumulate_grad_owned(dz);
        }),
    )
}

/// Mean per-pixel focal term (1 − p_t)^γ · (−log p_t). γ = 0 reduces to
/// cross entropy exactly.
pub fn focal_loss<T: Real>(logits: &Tensor<T>, mask: &Mask, gamma: f64) -> Result<Tensor<T>> {
    if gamma < 0.0 {
        return Err(Error::invalid(names::FOCAL_LOSS, "gamma must be non-negative"));
    }
    let (n, k, h, w) = check_mask(names::FOCAL_LOSS, logits, mask)?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let labels = mask.data().to_vec();
    let (probs, logp_t) = softmax_and_logp(&logits.data(), &labels, n, k, plane);
    let gamma_t = T::from_f64(gamma);

    let mut loss = T::zero();
    for &lp in &logp_t {
        let u = lp.exp();
        let w = if gamma == 0.0 { T::one() } else { (T::one() - u).powf(gamma_t) };
        loss -= w * lp;
    }
    loss = loss / T::from_f64(count);

    Tensor::from_op(
        vec![loss],
        vec![1],
        names::FOCAL_LOSS,
        vec![logits.clone()],
        Box::new(move |grad_out, _out, inputs| {
            let g = grad_out[0] / T::from_f64(count);
            let mut dz = vec![T::zero(); inputs[0].numel()];
            for bn in 0..n {
                for p in 0..plane {
                    let base = bn * k * plane + p;
                    let t = labels[bn * plane + p] as usize;
                    let lp = logp_t[bn * plane + p];
                    let u = lp.exp();
                    // df/du of f(u) = (1−u)^γ·(−ln u); γ = 0 is plain CE.
                    let df_du = if gamma == 0.0 {
                        -(T::one() / u)
                    } else {
                        gamma_t * (T::one() - u).powf(gamma_t - T::one()) * lp
                            - (T::one() - u).powf(gamma_t) / u
                    };
                    for c in 0..k {
                        let pc = probs[base + c * plane];
                        let indicator = if c == t { T::one() } else { T::zero() };
                        dz[base + c * plane] = df_du * u * (indicator - pc) * g;
                    }
                }
            }
            inputs[0].accumulate_grad_owned(dz);
        }),
    )
}

/// Cross entropy plus soft Dice.
pub fn combined_loss<T: Real>(logits: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    let ce = ce_loss(logits, mask)?;
    let dice = dice_loss(logits, mask)?;
    let one = Tensor::scalar(T::one());
    add_weighted(&ce, &dice, &one, &one)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_2x2(labels: [u32; 4]) -> Mask {
        Mask::new(labels.to_vec(), &[1, 2, 2]).unwrap()
    }

    /// Binary logits with ±m margin toward the mask's labels.
    fn sharp_logits(mask: &Mask, margin: f64) -> Tensor<f64> {
        let labels = mask.data();
        let plane = labels.len();
        let mut z = vec![0.0; 2 * plane];
        for (p, &l) in labels.iter().enumerate() {
            z[l as usize * plane + p] = margin;
            z[(1 - l as usize) * plane + p] = -margin;
        }
        Tensor::from_vec(z, &[1, 2, 2, 2]).unwrap()
    }

    #[test]
    fn perfect_predictions_drive_losses_to_zero() {
        let mask = mask_2x2([0, 1, 1, 0]);
        let logits = sharp_logits(&mask, 20.0);
        assert!(ce_loss(&logits, &mask).unwrap().item() < 0.01);
        assert!(dice_loss(&logits, &mask).unwrap().item() < 0.01);
    }

    #[test]
    fn uniform_binary_ce_is_ln2() {
        let mask = mask_2x2([0, 1, 0, 1]);
        let logits = Tensor::from_vec(vec![0.0; 8], &[1, 2, 2, 2]).unwrap();
        let ce = ce_loss(&logits, &mask).unwrap().item();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_gamma_zero_equals_ce() {
        let mask = mask_2x2([0, 1, 1, 1]);
        let logits = Tensor::from_vec(
            vec![0.3f64, -1.2, 0.8, 2.0, -0.5, 0.9, -1.1, 0.2],
            &[1, 2, 2, 2],
        )
        .unwrap();
        let ce = ce_loss(&logits, &mask).unwrap().item();
        let focal = focal_loss(&logits, &mask, 0.0).unwrap().item();
        assert!((ce - focal).abs() < 1e-12);
    }

    #[test]
    fn focal_downweights_easy_pixels() {
        let mask = mask_2x2([0, 1, 1, 0]);
        let logits = sharp_logits(&mask, 3.0);
        let ce = ce_loss(&logits, &mask).unwrap().item();
        let focal = focal_loss(&logits, &mask, 2.0).unwrap().item();
        assert!(focal < ce);
    }

    #[test]
    fn dice_loss_bounded() {
        let mask = mask_2x2([1, 1, 1, 1]);
        // Confidently wrong predictions: loss near 1.
        let inverted = mask_2x2([0, 0, 0, 0]);
        let logits = sharp_logits(&inverted, 20.0);
        let d = dice_loss(&logits, &mask).unwrap().item();
        assert!(d > 0.45 && d <= 1.0, "got {d}");
    }

    #[test]
    fn combined_is_sum() {
        let mask = mask_2x2([0, 1, 0, 1]);
        let logits = Tensor::from_vec(
            vec![0.4f64, -0.2, 1.4, 0.3, -0.9, 0.6, 0.1, -0.3],
            &[1, 2, 2, 2],
        )
        .unwrap();
        let total = combined_loss(&logits, &mask).unwrap().item();
        let parts =
            ce_loss(&logits, &mask).unwrap().item() + dice_loss(&logits, &mask).unwrap().item();
        assert!((total - parts).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mask = mask_2x2([0, 2, 0, 1]);
        let logits = Tensor::from_vec(vec![0.0; 8], &[1, 2, 2, 2]).unwrap();
        assert!(ce_loss(&logits, &mask).is_err());
    }
}
