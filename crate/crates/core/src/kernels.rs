//! Raw compute kernels shared by the tensor ops.
//!
//! Kernels parallelize over disjoint output rows; each element is produced
//! by a fixed sequential reduction, so results are bitwise identical for any
//! thread count.

use rayon::prelude::*;

use crate::real::Real;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 1 << 14;

/// C[m,n] += A[m,k] · B[k,n], all row-major.
pub fn matmul<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n < PAR_THRESHOLD {
        c.chunks_mut(n).enumerate().for_each(row);
    } else {
        c.par_chunks_mut(n).enumerate().for_each(row);
    }
}

/// C[m,n] += A[m,k] · B[n,k]ᵀ (A rows dotted with B rows).
pub fn matmul_bt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    };
    if m * k * n < PAR_THRESHOLD {
        c.chunks_mut(n).enumerate().for_each(row);
    } else {
        c.par_chunks_mut(n).enumerate().for_each(row);
    }
}

/// C[m,n] += A[k,m]ᵀ · B[k,n].
pub fn matmul_ta<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, crow): (usize, &mut [T])| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n < PAR_THRESHOLD {
        c.chunks_mut(n).enumerate().for_each(row);
    } else {
        c.par_chunks_mut(n).enumerate().for_each(row);
    }
}

// ── Grouped convolution GEMMs over batch-wide column matrices ────────
//
// Weights are (groups·m_g) × k_g row-major; the column matrix is
// (groups·k_g) × n with group g's rows contiguous. All three kernels
// parallelize across every output row, so heavily grouped convolutions
// (m_g as small as 2) still use all cores.

/// out[(g·m_g + i), :] += W[(g·m_g + i), :] · cols[g·k_g .., :]
///
/// Four k-taps per pass keep the output row in registers four times longer,
/// which is where most of the throughput comes from.
pub fn gemm_grouped<T: Real>(
    w: &[T],
    cols: &[T],
    out: &mut [T],
    groups: usize,
    m_g: usize,
    k_g: usize,
    n: usize,
) {
    debug_assert_eq!(w.len(), groups * m_g * k_g);
    debug_assert_eq!(cols.len(), groups * k_g * n);
    debug_assert_eq!(out.len(), groups * m_g * n);
    let row = |(r, orow): (usize, &mut [T])| {
        let g = r / m_g;
        let wrow = &w[r * k_g..(r + 1) * k_g];
        let cblock = &cols[g * k_g * n..(g + 1) * k_g * n];
        let mut p = 0;
        while p + 4 <= k_g {
            let a0 = wrow[p];
            let a1 = wrow[p + 1];
            let a2 = wrow[p + 2];
            let a3 = wrow[p + 3];
            let (r0, rest) = cblock[p * n..].split_at(n);
            let (r1, rest) = rest.split_at(n);
            let (r2, rest) = rest.split_at(n);
            let r3 = &rest[..n];
            for (j, ov) in orow.iter_mut().enumerate() {
                *ov += a0 * r0[j] + a1 * r1[j] + a2 * r2[j] + a3 * r3[j];
            }
            p += 4;
        }
        while p < k_g {
            let av = wrow[p];
            if av != T::zero() {
                let crow = &cblock[p * n..(p + 1) * n];
                for (ov, &cv) in orow.iter_mut().zip(crow) {
                    *ov += av * cv;
                }
            }
            p += 1;
        }
    };
    if groups * m_g * k_g * n < PAR_THRESHOLD {
        out.chunks_mut(n).enumerate().for_each(row);
    } else {
        out.par_chunks_mut(n).enumerate().for_each(row);
    }
}

/// dW[(g·m_g + i), :] += dOut[(g·m_g + i), :] · cols[g·k_g .., :]ᵀ
pub fn gemm_grouped_bt<T: Real>(
    d_out: &[T],
    cols: &[T],
    dw: &mut [T],
    groups: usize,
    m_g: usize,
    k_g: usize,
    n: usize,
) {
    debug_assert_eq!(d_out.len(), groups * m_g * n);
    debug_assert_eq!(cols.len(), groups * k_g * n);
    debug_assert_eq!(dw.len(), groups * m_g * k_g);
    let row = |(r, wrow): (usize, &mut [T])| {
        let g = r / m_g;
        let orow = &d_out[r * n..(r + 1) * n];
        let cblock = &cols[g * k_g * n..(g + 1) * k_g * n];
        for (p, wv) in wrow.iter_mut().enumerate() {
            let crow = &cblock[p * n..(p + 1) * n];
            // Four independent partial sums break the FMA dependency chain.
            let mut acc = [T::zero(); 4];
            let mut i = 0;
            while i + 4 <= n {
                acc[0] += orow[i] * crow[i];
                acc[1] += orow[i + 1] * crow[i + 1];
                acc[2] += orow[i + 2] * crow[i + 2];
                acc[3] += orow[i + 3] * crow[i + 3];
                i += 4;
            }
            let mut tail = T::zero();
            while i < n {
                tail += orow[i] * crow[i];
                i += 1;
            }
            *wv += ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail;
        }
    };
    if groups * m_g * k_g * n < PAR_THRESHOLD {
        dw.chunks_mut(k_g).enumerate().for_each(row);
    } else {
        dw.par_chunks_mut(k_g).enumerate().for_each(row);
    }
}

/// dcols[(g·k_g + p), :] += Σ_i W[(g·m_g + i), p] · dOut[(g·m_g + i), :]
pub fn gemm_grouped_ta<T: Real>(
    w: &[T],
    d_out: &[T],
    dcols: &mut [T],
    groups: usize,
    m_g: usize,
    k_g: usize,
    n: usize,
) {
    debug_assert_eq!(w.len(), groups * m_g * k_g);
    debug_assert_eq!(d_out.len(), groups * m_g * n);
    debug_assert_eq!(dcols.len(), groups * k_g * n);
    // Transposed weights per group, (k_g × m_g), so the inner loops read
    // both operands contiguously; W is tiny next to the column matrices.
    let mut wt = vec![T::zero(); w.len()];
    for g in 0..groups {
        let src = &w[g * m_g * k_g..(g + 1) * m_g * k_g];
        let dst = &mut wt[g * m_g * k_g..(g + 1) * m_g * k_g];
        for i in 0..m_g {
            for p in 0..k_g {
                dst[p * m_g + i] = src[i * k_g + p];
            }
        }
    }
    let wt = &wt;
    let row = |(r, crow): (usize, &mut [T])| {
        let g = r / k_g;
        let p = r % k_g;
        let wrow = &wt[(g * k_g + p) * m_g..(g * k_g + p + 1) * m_g];
        let dblock = &d_out[g * m_g * n..(g + 1) * m_g * n];
        let mut i = 0;
        while i + 4 <= m_g {
            let a0 = wrow[i];
            let a1 = wrow[i + 1];
            let a2 = wrow[i + 2];
            let a3 = wrow[i + 3];
            let (r0, rest) = dblock[i * n..].split_at(n);
            let (r1, rest) = rest.split_at(n);
            let (r2, rest) = rest.split_at(n);
            let r3 = &rest[..n];
            for (j, cv) in crow.iter_mut().enumerate() {
                *cv += a0 * r0[j] + a1 * r1[j] + a2 * r2[j] + a3 * r3[j];
            }
            i += 4;
        }
        while i < m_g {
            let wv = wrow[i];
            if wv != T::zero() {
                let orow = &dblock[i * n..(i + 1) * n];
                for (cv, &ov) in crow.iter_mut().zip(orow) {
                    *cv += wv * ov;
                }
            }
            i += 1;
        }
    };
    if groups * m_g * k_g * n < PAR_THRESHOLD {
        dcols.chunks_mut(n).enumerate().for_each(row);
    } else {
        dcols.par_chunks_mut(n).enumerate().for_each(row);
    }
}

/// Unfolds one sample (C,H,W) into columns of a (C·kh·kw) × `row_stride`
/// matrix starting at column `col_offset`. Row index is (c, ky, kx); within
/// a sample the column index is (oy, ox). Out-of-bounds taps are zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    cols: &mut [T],
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    row_stride: usize,
    col_offset: usize,
) {
    debug_assert_eq!(x.len(), channels * height * width);
    debug_assert_eq!(cols.len(), channels * kh * kw * row_stride);
    debug_assert!(col_offset + out_h * out_w <= row_stride);
    cols.par_chunks_mut(kh * kw * row_stride)
        .enumerate()
        .for_each(|(c, chunk)| {
            let plane = &x[c * height * width..(c + 1) * height * width];
            let mut row = 0;
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut chunk[row * row_stride + col_offset
                        ..row * row_stride + col_offset + out_h * out_w];
                    for oy in 0..out_h {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
                        if iy < 0 || iy >= height as isize {
                            dst_row.fill(T::zero());
                            continue;
                        }
                        let src_row = &plane[iy as usize * width..(iy as usize + 1) * width];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *d = if ix < 0 || ix >= width as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        });
}

/// Scatter-adds columns back onto one sample, the adjoint of [`im2col`]
/// with the same row stride/offset addressing. Parallel over channels; each
/// channel's target plane is disjoint, keeping accumulation order fixed.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    cols: &[T],
    x: &mut [T],
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    row_stride: usize,
    col_offset: usize,
) {
    debug_assert_eq!(x.len(), channels * height * width);
    debug_assert_eq!(cols.len(), channels * kh * kw * row_stride);
    x.par_chunks_mut(height * width).enumerate().for_each(|(c, plane)| {
        let chunk = &cols[c * kh * kw * row_stride..(c + 1) * kh * kw * row_stride];
        let mut row = 0;
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &chunk[row * row_stride + col_offset
                    ..row * row_stride + col_offset + out_h * out_w];
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * width..(iy as usize + 1) * width];
                    let src_row = &src[oy * out_w..(oy + 1) * out_w];
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < width as isize {
                            dst_row[ix as usize] += src_row[ox];
                        }
                    }
                }
                row += 1;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        matmul(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let m = 3;
        let k = 4;
        let n = 5;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.1 + 0.2).collect();
        let mut c = vec![0.0; m * n];
        matmul(&a, &b, &mut c, m, k, n);

        // A·B == Aᵀᵀ·B via matmul_ta with A stored transposed.
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_ta(&at, &b, &mut c2, m, k, n);
        assert_eq!(c, c2);

        // A·B == A·(Bᵀ)ᵀ via matmul_bt with B stored transposed.
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c3 = vec![0.0; m * n];
        matmul_bt(&a, &bt, &mut c3, m, k, n);
        assert_eq!(c, c3);
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        // Unrolled reductions reorder the sums; agreement is to roundoff.
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn grouped_gemms_match_per_group_matmuls() {
        let (groups, m_g, k_g, n) = (3usize, 2usize, 4usize, 7usize);
        let w: Vec<f64> = (0..groups * m_g * k_g).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols: Vec<f64> = (0..groups * k_g * n).map(|i| (i as f64 * 0.11).cos()).collect();

        let mut out = vec![0.0; groups * m_g * n];
        gemm_grouped(&w, &cols, &mut out, groups, m_g, k_g, n);
        let mut expect = vec![0.0; groups * m_g * n];
        for g in 0..groups {
            matmul(
                &w[g * m_g * k_g..(g + 1) * m_g * k_g],
                &cols[g * k_g * n..(g + 1) * k_g * n],
                &mut expect[g * m_g * n..(g + 1) * m_g * n],
                m_g,
                k_g,
                n,
            );
        }
        assert_close(&out, &expect);

        // bt: dW from dOut and cols.
        let d_out: Vec<f64> = (0..groups * m_g * n).map(|i| (i as f64 * 0.23).sin()).collect();
        let mut dw = vec![0.0; groups * m_g * k_g];
        gemm_grouped_bt(&d_out, &cols, &mut dw, groups, m_g, k_g, n);
        let mut dw_expect = vec![0.0; groups * m_g * k_g];
        for g in 0..groups {
            matmul_bt(
                &d_out[g * m_g * n..(g + 1) * m_g * n],
                &cols[g * k_g * n..(g + 1) * k_g * n],
                &mut dw_expect[g * m_g * k_g..(g + 1) * m_g * k_g],
                m_g,
                n,
                k_g,
            );
        }
        assert_close(&dw, &dw_expect);

        // ta: dcols from W and dOut.
        let mut dcols = vec![0.0; groups * k_g * n];
        gemm_grouped_ta(&w, &d_out, &mut dcols, groups, m_g, k_g, n);
        let mut dcols_expect = vec![0.0; groups * k_g * n];
        for g in 0..groups {
            matmul_ta(
                &w[g * m_g * k_g..(g + 1) * m_g * k_g],
                &d_out[g * m_g * n..(g + 1) * m_g * n],
                &mut dcols_expect[g * k_g * n..(g + 1) * k_g * n],
                k_g,
                m_g,
                n,
            );
        }
        assert_close(&dcols, &dcols_expect);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y — the defining
        // property of a linear map and its transpose.
        let (c, h, w, kh, kw, stride, pad) = (2usize, 5usize, 4usize, 3usize, 3usize, 1usize, 1usize);
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w + 2 * pad - kw) / stride + 1;
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..c * kh * kw * out_h * out_w).map(|i| (i as f64 * 0.3).cos()).collect();

        let patch = out_h * out_w;
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &mut cols, c, h, w, kh, kw, stride, pad, out_h, out_w, patch, 0);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();

        let mut xt = vec![0.0; x.len()];
        col2im(&y, &mut xt, c, h, w, kh, kw, stride, pad, out_h, out_w, patch, 0);
        let rhs: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();

        assert!((lhs - rhs).abs() < 1e-12, "adjoint identity violated: {lhs} vs {rhs}");
    }

    #[test]
    fn im2col_batch_offset_matches_single() {
        let (c, h, w) = (2usize, 4usize, 4usize);
        let x: Vec<f64> = (0..c * h * w).map(|i| i as f64).collect();
        let patch = h * w; // 3×3, pad 1, stride 1 keeps the size
        let mut single = vec![0.0; c * 9 * patch];
        im2col(&x, &mut single, c, h, w, 3, 3, 1, 1, h, w, patch, 0);

        // Same sample written at column offset `patch` of a 2-sample matrix.
        let mut batched = vec![0.0; c * 9 * 2 * patch];
        im2col(&x, &mut batched, c, h, w, 3, 3, 1, 1, h, w, 2 * patch, patch);
        for row in 0..c * 9 {
            assert_eq!(
                &batched[row * 2 * patch + patch..(row * 2 + 2) * patch],
                &single[row * patch..(row + 1) * patch]
            );
        }
    }
}
