//! Naive reference implementations used as oracles by the test suite.
//!
//! Everything here is written as plain nested loops over raw slices, with no
//! shared code with the fast paths in [`crate::ops`]. Keep it that way: the
//! value of these oracles is their independence.

/// Direct convolution: x (N,C_in,H,W), weight (C_out, C_in/groups, kh, kw),
/// optional bias (C_out). Output (N, C_out, H', W').
#[allow(clippy::too_many_arguments)]
pub fn conv2d_naive(
    x: &[f64],
    x_shape: (usize, usize, usize, usize),
    weight: &[f64],
    w_shape: (usize, usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, (usize, usize, usize, usize)) {
    let (n_batch, c_in, h, w) = x_shape;
    let (c_out, c_in_g, kh, kw) = w_shape;
    assert_eq!(c_in_g, c_in / groups);
    let out_h = (h + 2 * pad - kh) / stride + 1;
    let out_w = (w + 2 * pad - kw) / stride + 1;
    let c_out_g = c_out / groups;
    let mut out = vec![0.0; n_batch * c_out * out_h * out_w];
    for n in 0..n_batch {
        for oc in 0..c_out {
            let g = oc / c_out_g;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for ic_g in 0..c_in_g {
                        let ic = g * c_in_g + ic_g;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((n * c_in + ic) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((oc * c_in_g + ic_g) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * c_out + oc) * out_h + oy) * out_w + ox] = acc;
                }
            }
        }
    }
    (out, (n_batch, c_out, out_h, out_w))
}

/// 2×2/stride-2 max pooling by direct window scan.
pub fn maxpool2d_naive(
    x: &[f64],
    x_shape: (usize, usize, usize, usize),
) -> (Vec<f64>, (usize, usize, usize, usize)) {
    let (n_batch, c, h, w) = x_shape;
    assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n_batch * c * oh * ow];
    for n in 0..n_batch {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x[((n * c + ch) * h + 2 * oy + dy) * w + 2 * ox + dx];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[((n * c + ch) * oh + oy) * ow + ox] = best;
                }
            }
        }
    }
    (out, (n_batch, c, oh, ow))
}

/// Spatial mean per (n, c).
pub fn global_avg_pool_naive(x: &[f64], x_shape: (usize, usize, usize, usize)) -> Vec<f64> {
    let (n_batch, c, h, w) = x_shape;
    let mut out = vec![0.0; n_batch * c];
    for n in 0..n_batch {
        for ch in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    acc += x[((n * c + ch) * h + y) * w + xx];
                }
            }
            out[n * c + ch] = acc / (h * w) as f64;
        }
    }
    out
}

/// Same-length 1-D convolution across channels with zero padding.
pub fn conv1d_channels_naive(v: &[f64], n_batch: usize, c: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let half = (k - 1) / 2;
    let mut out = vec![0.0; n_batch * c];
    for n in 0..n_batch {
        for i in 0..c {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let src = i as isize + j as isize - half as isize;
                if src >= 0 && (src as usize) < c {
                    acc += kv * v[n * c + src as usize];
                }
            }
            out[n * c + i] = acc;
        }
    }
    out
}

/// 2× bilinear upsampling, align-corners=false, by direct evaluation of the
/// source-coordinate formula with edge clamping.
pub fn bilinear_upsample2x_naive(
    x: &[f64],
    x_shape: (usize, usize, usize, usize),
) -> (Vec<f64>, (usize, usize, usize, usize)) {
    let (n_batch, c, h, w) = x_shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n_batch * c * oh * ow];
    for n in 0..n_batch {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
                    let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
                    let sy = sy.max(0.0);
                    let sx = sx.max(0.0);
                    let y0 = sy.floor() as usize;
                    let x0 = sx.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let x1 = (x0 + 1).min(w - 1);
                    let fy = sy - y0 as f64;
                    let fx = sx - x0 as f64;
                    let at = |yy: usize, xx: usize| x[((n * c + ch) * h + yy) * w + xx];
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    out[((n * c + ch) * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    (out, (n_batch, c, oh, ow))
}

/// Per-class overlap counts between integer masks: (intersection, a-size,
/// b-size) for class `class`.
pub fn overlap_counts(a: &[u32], b: &[u32], class: u32) -> (usize, usize, usize) {
    assert_eq!(a.len(), b.len());
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for (&av, &bv) in a.iter().zip(b) {
        let ina = av == class;
        let inb = bv == class;
        if ina {
            na += 1;
        }
        if inb {
            nb += 1;
        }
        if ina && inb {
            inter += 1;
        }
    }
    (inter, na, nb)
}
