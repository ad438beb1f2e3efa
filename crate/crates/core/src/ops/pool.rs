//! Spatial resampling ops: max pooling, global average pooling, bilinear
//! upsampling.

use crate::error::{Error, Result};
use crate::ops::names;
use crate::real::Real;
use crate::tensor::{dims4, Tensor};
use rayon::prelude::*;

/// 2×2 max pooling with stride 2. Ties route the gradient to the first
/// element of the window in row-major order, keeping backward deterministic.
pub fn maxpool2d<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n_batch, c, h, w) = dims4(names::MAXPOOL2D, x.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            names::MAXPOOL2D,
            format!("spatial dims must be even, got {h}×{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![T::zero(); n_batch * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for nc in 0..n_batch * c {
        let plane = &xd[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        let v = plane[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = nc * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = nc * h * w + best_idx;
            }
        }
    }
    drop(xd);
    Tensor::from_op(
        out,
        vec![n_batch, c, oh, ow],
        names::MAXPOOL2D,
        vec![x.clone()],
        Box::new(move |grad_out, _out, inputs| {
            let x = &inputs[0];
            let mut dx = vec![T::zero(); x.numel()];
            for (o, &src) in argmax.iter().enumerate() {
                dx[src] += grad_out[o];
            }
            x.accumulate_grad_owned(dx);
        }),
    )
}

/// Spatial mean per channel: N×C×H×W → N×C×1×1.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n_batch, c, h, w) = dims4(names::GLOBAL_AVG_POOL, x.shape())?;
    let plane = h * w;
    let norm = T::from_f64(1.0 / plane as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); n_batch * c];
    for nc in 0..n_batch * c {
        let mut acc = T::zero();
        for &v in &xd[nc * plane..(nc + 1) * plane] {
            acc += v;
        }
        out[nc] = acc * norm;
    }
    drop(xd);
    Tensor::from_op(
        out,
        vec![n_batch, c, 1, 1],
        names::GLOBAL_AVG_POOL,
        vec![x.clone()],
        Box::new(move |grad_out, _out, inputs| {
            let x = &inputs[0];
            let mut dx = vec![T::zero(); x.numel()];
            for nc in 0..n_batch * c {
                let g = grad_out[nc] * norm;
                for v in &mut dx[nc * plane..(nc + 1) * plane] {
                    *v = g;
                }
            }
            x.accumulate_grad_owned(dx);
        }),
    )
}

// Interpolation taps for one output axis position under align-corners=false
// 2× upsampling: (low index, high index, weight of high tap).
fn upsample_taps<T: Real>(out_len: usize, in_len: usize) -> Vec<(usize, usize, T)> {
    (0..out_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, T::from_f64(s - lo as f64))
        })
        .collect()
}

/// 2× bilinear upsampling, align-corners=false convention.
pub fn bilinear_upsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n_batch, c, h, w) = dims4(names::BILINEAR_UPSAMPLE2X, x.shape())?;
    let (oh, ow) = (2 * h, 2 * w);
    let ytaps: Vec<(usize, usize, T)> = upsample_taps(oh, h);
    let xtaps: Vec<(usize, usize, T)> = upsample_taps(ow, w);
    let xd = x.data();
    let xs: &[T] = &xd;
    let mut out = vec![T::zero(); n_batch * c * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(nc, dst)| {
        let plane = &xs[nc * h * w..(nc + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
            let top_row = &plane[y0 * w..(y0 + 1) * w];
            let bot_row = &plane[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let top = top_row[x0] + (top_row[x1] - top_row[x0]) * fx;
                let bot = bot_row[x0] + (bot_row[x1] - bot_row[x0]) * fx;
                dst_row[ox] = top + (bot - top) * fy;
            }
        }
    });
    drop(xd);
    Tensor::from_op(
        out,
        vec![n_batch, c, oh, ow],
        names::BILINEAR_UPSAMPLE2X,
        vec![x.clone()],
        Box::new(move |grad_out, _out, inputs| {
            let x = &inputs[0];
            let mut dx = vec![T::zero(); x.numel()];
            dx.par_chunks_mut(h * w).enumerate().for_each(|(nc, dst)| {
                let src = &grad_out[nc * oh * ow..(nc + 1) * oh * ow];
                for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                        let g = src_row[ox];
                        let gy1 = g * fy;
                        let gy0 = g - gy1;
                        dst[y0 * w + x0] += gy0 - gy0 * fx;
                        dst[y0 * w + x1] += gy0 * fx;
                        dst[y1 * w + x0] += gy1 - gy1 * fx;
                        dst[y1 * w + x1] += gy1 * fx;
                    }
                }
            });
            x.accumulate_grad_owned(dx);
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum_all;
    use crate::reference;

    #[test]
    fn maxpool_single_window() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let y = maxpool2d(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 4.0);
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let x = Tensor::param(vec![5.0; 16], &[1, 1, 4, 4]).unwrap();
        let y = maxpool2d(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
        let s = sum_all(&y).unwrap();
        s.backward().unwrap();
        let g = x.grad().unwrap();
        // One unit of gradient per window, on the window's first element.
        let expect = vec![
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(g, expect);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(maxpool2d(&x).is_err());
    }

    #[test]
    fn maxpool_matches_oracle() {
        let data: Vec<f64> = (0..2 * 8 * 8).map(|i| ((i * 37) % 64) as f64 * 0.31 - 3.0).collect();
        let x = Tensor::from_vec(data.clone(), &[1, 2, 8, 8]).unwrap();
        let y = maxpool2d(&x).unwrap();
        let (expect, _) = reference::maxpool2d_naive(&data, (1, 2, 8, 8));
        assert_eq!(*y.data(), expect);
    }

    #[test]
    fn gap_constant_and_mean() {
        let x = Tensor::full(&[1, 1, 3, 3], 2.5f64);
        assert_eq!(global_avg_pool(&x).unwrap().item(), 2.5);
        let x = Tensor::from_vec(vec![1.0, 3.0, 5.0, 7.0], &[1, 1, 2, 2]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().item(), 4.0);
    }

    #[test]
    fn gap_matches_oracle() {
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i as f64 * 0.17).sin()).collect();
        let x = Tensor::from_vec(data.clone(), &[2, 3, 4, 4]).unwrap();
        let y = global_avg_pool(&x).unwrap();
        let expect = reference::global_avg_pool_naive(&data, (2, 3, 4, 4));
        for (got, want) in y.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::full(&[1, 2, 3, 3], 0.7f64);
        let y = bilinear_upsample2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 6]);
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn upsample_known_row() {
        // [0, 2] → [0, 0.5, 1.5, 2] under align-corners=false.
        let x = Tensor::from_vec(vec![0.0, 2.0], &[1, 1, 1, 2]).unwrap();
        let y = bilinear_upsample2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        let d = y.data();
        for row in 0..2 {
            assert_eq!(&d[row * 4..(row + 1) * 4], &[0.0, 0.5, 1.5, 2.0]);
        }
    }

    #[test]
    fn upsample_matches_oracle() {
        let data: Vec<f64> = (0..2 * 5 * 6).map(|i| (i as f64 * 0.711).cos()).collect();
        let x = Tensor::from_vec(data.clone(), &[1, 2, 5, 6]).unwrap();
        let y = bilinear_upsample2x(&x).unwrap();
        let (expect, _) = reference::bilinear_upsample2x_naive(&data, (1, 2, 5, 6));
        for (got, want) in y.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}
