//! Batch normalization over N×C×H×W.

use crate::error::{Error, Result};
use crate::ops::names;
use crate::real::Real;
use crate::tensor::{dims4, Tensor};

/// Normalization mode: batch statistics (updating running stats) or the
/// stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch normalization. In train mode normalizes by per-channel batch
/// statistics (biased variance) and folds them into `running_mean` /
/// `running_var` with the given momentum (unbiased variance, matching the
/// usual convention); in eval mode uses the running statistics. The epsilon
/// guards zero-variance channels.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    momentum: f64,
    eps: f64,
    mode: NormMode,
) -> Result<Tensor<T>> {
    let (n_batch, c, h, w) = dims4(names::BATCHNORM2D, x.shape())?;
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
        if t.shape() != [c] {
            return Err(Error::shape(
                names::BATCHNORM2D,
                format!("{name} has shape {:?}, expected [{c}]", t.shape()),
            ));
        }
    }
    let plane = h * w;
    let count = n_batch * plane;
    let eps_t = T::from_f64(eps);

    let (mean, istd) = match mode {
        NormMode::Train => {
            let xd = x.data();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = T::zero();
                for n in 0..n_batch {
                    for &v in &xd[(n * c + ch) * plane..(n * c + ch + 1) * plane] {
                        acc += v;
                    }
                }
                let m = acc / T::from_f64(count as f64);
                let mut vacc = T::zero();
                for n in 0..n_batch {
                    for &v in &xd[(n * c + ch) * plane..(n * c + ch + 1) * plane] {
                        let d = v - m;
                        vacc += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = vacc / T::from_f64(count as f64);
            }
            drop(xd);

            // Fold batch statistics into the running estimates.
            let m_t = T::from_f64(momentum);
            let keep = T::one() - m_t;
            let unbias = if count > 1 {
                T::from_f64(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            let new_mean: Vec<T> = running_mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| keep * r + m_t * b)
                .collect();
            let new_var: Vec<T> = running_var
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &b)| keep * r + m_t * b * unbias)
                .collect();
            running_mean.set_data(&new_mean);
            running_var.set_data(&new_var);

            let istd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
            (mean, istd)
        }
        NormMode::Eval => {
            let mean = running_mean.to_vec();
            let istd: Vec<T> =
                running_var.data().iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
            (mean, istd)
        }
    };

    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![T::zero(); xd.len()];
    for n in 0..n_batch {
        for ch in 0..c {
            let (m, s, g, b) = (mean[ch], istd[ch], gd[ch], bd[ch]);
            let base = (n * c + ch) * plane;
            for p in 0..plane {
                out[base + p] = (xd[base + p] - m) * s * g + b;
            }
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);

    let train = mode == NormMode::Train;
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        names::BATCHNORM2D,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |grad_out, _out, inputs| {
            let (x, gamma, beta) = (&inputs[0], &inputs[1], &inputs[2]);
            let xd = x.data();
            let gd = gamma.data();
            let inv_count = T::from_f64(1.0 / count as f64);

            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = if x.needs_grad() { vec![T::zero(); xd.len()] } else { Vec::new() };
            for ch in 0..c {
                let (m, s) = (mean[ch], istd[ch]);
                // Per-channel sums of dy and dy·x̂.
                let mut sum_dy = T::zero();
                let mut sum_dy_xhat = T::zero();
                for n in 0..n_batch {
                    let base = (n * c + ch) * plane;
                    for p in 0..plane {
                        let dy = grad_out[base + p];
                        let xhat = (xd[base + p] - m) * s;
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                    }
                }
                dbeta[ch] = sum_dy;
                dgamma[ch] = sum_dy_xhat;
                if x.needs_grad() {
                    let g = gd[ch];
                    if train {
                        // Gradient through the batch statistics themselves.
                        let mean_dy = sum_dy * inv_count;
                        let mean_dy_xhat = sum_dy_xhat * inv_count;
                        for n in 0..n_batch {
                            let base = (n * c + ch) * plane;
                            for p in 0..plane {
                                let dy = grad_out[base + p];
                                let xhat = (xd[base + p] - m) * s;
                                dx[base + p] = g * s * (dy - mean_dy - xhat * mean_dy_xhat);
                            }
                        }
                    } else {
                        for n in 0..n_batch {
                            let base = (n * c + ch) * plane;
                            for p in 0..plane {
                                dx[base + p] = grad_out[base + p] * g * s;
                            }
                        }
                    }
                }
            }
            drop(xd);
            drop(gd);
            if x.needs_grad() {
                x.accumulate_grad_owned(dx);
            }
            if gamma.needs_grad() {
                gamma.accumulate_grad_owned(dgamma);
            }
            if beta.needs_grad() {
                beta.accumulate_grad_owned(dbeta);
            }
        }),
    )
}
