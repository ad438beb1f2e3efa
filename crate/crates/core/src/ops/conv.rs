//! 2-D (grouped) convolution and the 1-D channel convolution used by
//! channel attention.
//!
//! The 2-D forward lowers each sample to a column matrix (im2col) and runs
//! one small matmul per channel group; backward reuses the same lowering for
//! the weight gradient and scatters columns back for the input gradient.

use crate::error::{Error, Result};
use crate::kernels;
use rayon::prelude::*;
use crate::ops::names;
use crate::real::Real;
use crate::tensor::{dims4, Tensor};

/// Convolution parameters: weight (C_out × C_in/groups × kh × kw), optional
/// bias (C_out), stride, zero padding, channel groups.
#[derive(Clone)]
pub struct ConvParams<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn new(
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 {
            return Err(Error::shape(names::CONV2D, format!("weight must be 4-D, got {ws:?}")));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::invalid(names::CONV2D, "stride and groups must be positive"));
        }
        let c_out = ws[0];
        if c_out % groups != 0 {
            return Err(Error::invalid(
                names::CONV2D,
                format!("output channels {c_out} not divisible by groups {groups}"),
            ));
        }
        if let Some(b) = &bias {
            if b.shape() != [c_out] {
                return Err(Error::shape(
                    names::CONV2D,
                    format!("bias {:?} for {c_out} output channels", b.shape()),
                ));
            }
        }
        Ok(ConvParams { weight, bias, stride, padding, groups })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }
}

struct ConvGeom {
    n_batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.out_h * self.out_w
    }

    fn k_group(&self) -> usize {
        (self.c_in / self.groups) * self.kh * self.kw
    }
}

fn conv_geometry<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<ConvGeom> {
    let (n_batch, c_in, h, w) = dims4(names::CONV2D, x.shape())?;
    let ws = p.weight.shape();
    let (c_out, c_in_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if c_in % p.groups != 0 {
        return Err(Error::invalid(
            names::CONV2D,
            format!("input channels {c_in} not divisible by groups {}", p.groups),
        ));
    }
    if c_in_g != c_in / p.groups {
        return Err(Error::shape(
            names::CONV2D,
            format!("weight expects {} channels/group, input provides {}", c_in_g, c_in / p.groups),
        ));
    }
    if h + 2 * p.padding < kh || w + 2 * p.padding < kw {
        return Err(Error::shape(
            names::CONV2D,
            format!("kernel {kh}×{kw} larger than padded input {h}×{w}"),
        ));
    }
    Ok(ConvGeom {
        n_batch,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride: p.stride,
        pad: p.padding,
        groups: p.groups,
        out_h: (h + 2 * p.padding - kh) / p.stride + 1,
        out_w: (w + 2 * p.padding - kw) / p.stride + 1,
    })
}

/// Grouped 2-D convolution. Output channels of group g read only input
/// channels of group g. Differentiable w.r.t. input, weight and bias.
///
/// Each sample is lowered to a column matrix and convolved by one grouped
/// GEMM whose rows are all output channels; samples run in parallel. A
/// sample's output slice is (C_out × P) row-major, exactly the GEMM layout.
pub fn conv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let g = conv_geometry(x, p)?;
    let patch = g.patch();
    let k_group = g.k_group();
    let c_out_g = g.c_out / g.groups;

    let xd = x.data();
    let xd: &[T] = &xd;
    let wd = p.weight.data();
    let wd: &[T] = &wd;
    let bias = p.bias.as_ref().map(|b| b.to_vec());
    let mut out = vec![T::zero(); g.n_batch * g.c_out * patch];
    let run_sample = |(n, out_n): (usize, &mut [T])| {
        let mut cols = vec![T::zero(); g.c_in * g.kh * g.kw * patch];
        kernels::im2col(
            &xd[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w],
            &mut cols,
            g.c_in,
            g.h,
            g.w,
            g.kh,
            g.kw,
            g.stride,
            g.pad,
            g.out_h,
            g.out_w,
            patch,
            0,
        );
        kernels::gemm_grouped(wd, &cols, out_n, g.groups, c_out_g, k_group, patch);
        if let Some(b) = &bias {
            for (oc, row) in out_n.chunks_mut(patch).enumerate() {
                let bv = b[oc];
                for v in row {
                    *v += bv;
                }
            }
        }
    };
    if g.n_batch > 1 {
        out.par_chunks_mut(g.c_out * patch).enumerate().for_each(run_sample);
    } else {
        out.chunks_mut(g.c_out * patch).enumerate().for_each(run_sample);
    }

    let mut inputs = vec![x.clone(), p.weight.clone()];
    if let Some(b) = &p.bias {
        inputs.push(b.clone());
    }
    let out_shape = vec![g.n_batch, g.c_out, g.out_h, g.out_w];
    Tensor::from_op(
        out,
        out_shape,
        names::CONV2D,
        inputs,
        Box::new(move |grad_out, _out, inputs| {
            conv2d_backward(grad_out, inputs, &g);
        }),
    )
}

fn conv2d_backward<T: Real>(grad_out: &[T], inputs: &[Tensor<T>], g: &ConvGeom) {
    let x = &inputs[0];
    let weight = &inputs[1];
    let bias = inputs.get(2);
    let patch = g.patch();
    let k_group = g.k_group();
    let c_out_g = g.c_out / g.groups;
    let wants_dx = x.needs_grad();
    let wants_dw = weight.needs_grad();

    if let Some(b) = bias {
        if b.needs_grad() {
            let mut db = vec![T::zero(); g.c_out];
            for n in 0..g.n_batch {
                for c in 0..g.c_out {
                    let mut acc = T::zero();
                    for &v in &grad_out[(n * g.c_out + c) * patch..(n * g.c_out + c + 1) * patch] {
                        acc += v;
                    }
                    db[c] += acc;
                }
            }
            b.accumulate_grad_owned(db);
        }
    }
    if !wants_dx && !wants_dw {
        return;
    }

    let xd = x.data();
    let xd: &[T] = &xd;
    let wd = weight.data();
    let wd: &[T] = &wd;
    // Per-sample partial results, reduced in fixed order afterwards.
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..g.n_batch)
        .into_par_iter()
        .map(|n| {
            let gout_n = &grad_out[n * g.c_out * patch..(n + 1) * g.c_out * patch];
            let dw_n = if wants_dw {
                let mut cols = vec![T::zero(); g.c_in * g.kh * g.kw * patch];
                kernels::im2col(
                    &xd[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w],
                    &mut cols,
                    g.c_in,
                    g.h,
                    g.w,
                    g.kh,
                    g.kw,
                    g.stride,
                    g.pad,
                    g.out_h,
                    g.out_w,
                    patch,
                    0,
                );
                let mut dw = vec![T::zero(); wd.len()];
                kernels::gemm_grouped_bt(gout_n, &cols, &mut dw, g.groups, c_out_g, k_group, patch);
                dw
            } else {
                Vec::new()
            };
            let dx_n = if wants_dx {
                let mut dcols = vec![T::zero(); g.c_in * g.kh * g.kw * patch];
                kernels::gemm_grouped_ta(wd, gout_n, &mut dcols, g.groups, c_out_g, k_group, patch);
                let mut dx = vec![T::zero(); g.c_in * g.h * g.w];
                kernels::col2im(
                    &dcols,
                    &mut dx,
                    g.c_in,
                    g.h,
                    g.w,
                    g.kh,
                    g.kw,
                    g.stride,
                    g.pad,
                    g.out_h,
                    g.out_w,
                    patch,
                    0,
                );
                dx
            } else {
                Vec::new()
            };
            (dw_n, dx_n)
        })
        .collect();

    if wants_dw {
        let mut dw = vec![T::zero(); weight.numel()];
        for (dw_n, _) in &per_sample {
            for (d, &s) in dw.iter_mut().zip(dw_n) {
                *d += s;
            }
        }
        weight.accumulate_grad_owned(dw);
    }
    if wants_dx {
        let mut dx = vec![T::zero(); x.numel()];
        for (n, (_, dx_n)) in per_sample.iter().enumerate() {
            dx[n * g.c_in * g.h * g.w..(n + 1) * g.c_in * g.h * g.w].copy_from_slice(dx_n);
        }
        x.accumulate_grad_owned(dx);
    }
}

/// Same-length 1-D convolution across the channel axis of an N×C tensor
/// with a single shared odd-size kernel and zero padding.
pub fn conv1d_channels<T: Real>(v: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (n_batch, c) = match v.shape() {
        [n, c] => (*n, *c),
        other => {
            return Err(Error::shape(names::CONV1D_CHANNELS, format!("expected N×C, got {other:?}")))
        }
    };
    let k = kernel.numel();
    if kernel.shape().len() != 1 || k % 2 == 0 {
        return Err(Error::invalid(
            names::CONV1D_CHANNELS,
            format!("kernel must be 1-D with odd length, got {:?}", kernel.shape()),
        ));
    }
    let half = (k - 1) / 2;
    let vd = v.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); n_batch * c];
    for n in 0..n_batch {
        for i in 0..c {
            let mut acc = T::zero();
            for (j, &kv) in kd.iter().enumerate() {
                let src = i as isize + j as isize - half as isize;
                if src >= 0 && (src as usize) < c {
                    acc += kv * vd[n * c + src as usize];
                }
            }
            out[n * c + i] = acc;
        }
    }
    drop(vd);
    drop(kd);
    Tensor::from_op(
        out,
        vec![n_batch, c],
        names::CONV1D_CHANNELS,
        vec![v.clone(), kernel.clone()],
        Box::new(move |grad_out, _out, inputs| {
            let (v, kernel) = (&inputs[0], &inputs[1]);
            if v.needs_grad() {
                let kd = kernel.data();
                let mut dv = vec![T::zero(); n_batch * c];
                for n in 0..n_batch {
                    for i in 0..c {
                        let g = grad_out[n * c + i];
                        for (j, &kv) in kd.iter().enumerate() {
                            let src = i as isize + j as isize - half as isize;
                            if src >= 0 && (src as usize) < c {
                                dv[n * c + src as usize] += g * kv;
                            }
                        }
                    }
                }
                drop(kd);
                v.accumulate_grad_owned(dv);
            }
            if kernel.needs_grad() {
                let vd = v.data();
                let mut dk = vec![T::zero(); k];
                for n in 0..n_batch {
                    for i in 0..c {
                        let g = grad_out[n * c + i];
                        for (j, dkj) in dk.iter_mut().enumerate() {
                            let src = i as isize + j as isize - half as isize;
                            if src >= 0 && (src as usize) < c {
                                *dkj += g * vd[n * c + src as usize];
                            }
                        }
                    }
                }
                drop(vd);
                kernel.accumulate_grad_owned(dk);
            }
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;

    fn rand_vec(len: usize, seed: u64) -> Vec<f64> {
        // Small deterministic pseudo-random values.
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        (0..len)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn all_ones_center_value() {
        // 3×3 all-ones kernel over all-ones 3×3 input, pad 1: center sums 9.
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f64);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0f64);
        let p = ConvParams::new(w, None, 1, 1, 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        // Corners see a 2×2 window.
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn group_isolation() {
        // groups=4, C_in=4, C_out=8: zeroing input channel 0 may only change
        // output channels 0–1.
        let x_data = rand_vec(1 * 4 * 2 * 2, 3);
        let x = Tensor::from_vec(x_data.clone(), &[1, 4, 2, 2]).unwrap();
        let w = Tensor::from_vec(rand_vec(8 * 1 * 3 * 3, 4), &[8, 1, 3, 3]).unwrap();
        let p = ConvParams::new(w, None, 1, 1, 4).unwrap();
        let y0 = conv2d(&x, &p).unwrap();
        assert_eq!(y0.shape(), &[1, 8, 2, 2]);

        let mut zeroed = x_data;
        for v in zeroed.iter_mut().take(4) {
            *v = 0.0;
        }
        let xz = Tensor::from_vec(zeroed, &[1, 4, 2, 2]).unwrap();
        let y1 = conv2d(&xz, &p).unwrap();
        let (a, b) = (y0.data(), y1.data());
        for c in 0..8 {
            for i in 0..4 {
                let idx = c * 4 + i;
                if c < 2 {
                    continue; // group 0's outputs may change
                }
                assert_eq!(a[idx], b[idx], "cross-group leak at channel {c}");
            }
        }
    }

    #[test]
    fn matches_naive_oracle() {
        let x_data = rand_vec(1 * 4 * 6 * 6, 7);
        let w_data = rand_vec(5 * 4 * 3 * 3, 8);
        let b_data = rand_vec(5, 9);
        let x = Tensor::from_vec(x_data.clone(), &[1, 4, 6, 6]).unwrap();
        let w = Tensor::from_vec(w_data.clone(), &[5, 4, 3, 3]).unwrap();
        let b = Tensor::from_vec(b_data.clone(), &[5]).unwrap();
        let p = ConvParams::new(w, Some(b), 1, 1, 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        let (expect, shape) = reference::conv2d_naive(
            &x_data,
            (1, 4, 6, 6),
            &w_data,
            (5, 4, 3, 3),
            Some(&b_data),
            1,
            1,
            1,
        );
        assert_eq!(y.shape(), &[shape.0, shape.1, shape.2, shape.3]);
        for (got, want) in y.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn grouped_matches_naive_oracle_with_stride() {
        let x_data = rand_vec(2 * 6 * 5 * 8, 11);
        let w_data = rand_vec(9 * 2 * 3 * 3, 12);
        let x = Tensor::from_vec(x_data.clone(), &[2, 6, 5, 8]).unwrap();
        let w = Tensor::from_vec(w_data.clone(), &[9, 2, 3, 3]).unwrap();
        let p = ConvParams::new(w, None, 2, 1, 3).unwrap();
        let y = conv2d(&x, &p).unwrap();
        let (expect, shape) =
            reference::conv2d_naive(&x_data, (2, 6, 5, 8), &w_data, (9, 2, 3, 3), None, 2, 1, 3);
        assert_eq!(y.shape(), &[shape.0, shape.1, shape.2, shape.3]);
        for (got, want) in y.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[8, 4, 3, 3]);
        let p = ConvParams::new(w, None, 1, 1, 1).unwrap();
        assert!(conv2d(&x, &p).is_err());

        // non-divisible groups at construction
        let w = Tensor::<f64>::zeros(&[9, 1, 3, 3]);
        assert!(ConvParams::new(w, None, 1, 1, 2).is_err());
    }

    #[test]
    fn conv1d_identity_kernel() {
        let v = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]).unwrap();
        let k = Tensor::from_vec(vec![0.0, 1.0, 0.0], &[3]).unwrap();
        let y = conv1d_channels(&v, &k).unwrap();
        assert_eq!(*y.data(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv1d_zero_padding_boundary() {
        // ramp [1,2,3] with box kernel: first output = 0+1+2 = 3.
        let v = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        let k = Tensor::from_vec(vec![1.0, 1.0, 1.0], &[3]).unwrap();
        let y = conv1d_channels(&v, &k).unwrap();
        assert_eq!(y.data()[0], 3.0);
        assert_eq!(y.data()[1], 6.0);
        assert_eq!(y.data()[2], 5.0);
    }

    #[test]
    fn conv1d_matches_oracle() {
        let v_data = rand_vec(2 * 9, 21);
        let k_data = rand_vec(5, 22);
        let v = Tensor::from_vec(v_data.clone(), &[2, 9]).unwrap();
        let k = Tensor::from_vec(k_data.clone(), &[5]).unwrap();
        let y = conv1d_channels(&v, &k).unwrap();
        let expect = reference::conv1d_channels_naive(&v_data, 2, 9, &k_data);
        for (got, want) in y.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let v = Tensor::<f64>::zeros(&[1, 4]);
        let k = Tensor::<f64>::zeros(&[4]);
        assert!(conv1d_channels(&v, &k).is_err());
    }
}
