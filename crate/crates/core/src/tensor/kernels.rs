//! Raw f32 kernels behind the tensor layer: im2col convolution and the two
//! GEMM shapes it needs.
//!
//! Every output element is accumulated in a fixed order that does not depend
//! on SIMD width, so encoder and decoder always see bit-identical values.

use super::Shape;

/// Zero "same" padding used by every convolution: `(k - 1) / 2` leading pad.
#[inline]
pub fn same_pad(k: usize) -> usize {
    (k - 1) / 2
}

#[inline]
pub fn conv_out_extent(extent: usize, stride: usize) -> usize {
    extent.div_ceil(stride)
}

const MR: usize = 4;
const NR: usize = 32;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Register-blocked over `MR × NR` tiles; each output element is still summed
/// in ascending `p` order starting from its initial value.
pub fn gemm_nn(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            tile_full(i, j, n, k, a, b, c);
            j += NR;
        }
        if j < n {
            for r in i..i + MR {
                row_tail(r, j, n, k, a, b, c);
            }
        }
        i += MR;
    }
    for r in i..m {
        row_tail(r, 0, n, k, a, b, c);
    }
}

#[inline(always)]
fn tile_full(i: usize, j: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    let mut acc = [[0.0f32; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
    }
    let a0 = &a[i * k..(i + 1) * k];
    let a1 = &a[(i + 1) * k..(i + 2) * k];
    let a2 = &a[(i + 2) * k..(i + 3) * k];
    let a3 = &a[(i + 3) * k..(i + 4) * k];
    let bt = &b[j..];
    for p in 0..k {
        let bv: &[f32; NR] = bt[p * n..p * n + NR].try_into().unwrap();
        let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
        for q in 0..NR {
            acc[0][q] += x0 * bv[q];
            acc[1][q] += x1 * bv[q];
            acc[2][q] += x2 * bv[q];
            acc[3][q] += x3 * bv[q];
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
    }
}

/// One output row over columns `j0..n`, same summation order as the tiles.
fn row_tail(r: usize, j0: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    let crow = &mut c[r * n + j0..(r + 1) * n];
    for p in 0..k {
        let av = a[r * k + p];
        let brow = &b[p * n + j0..(p + 1) * n];
        for (cv, &bv) in crow.iter_mut().zip(brow) {
            *cv += av * bv;
        }
    }
}

/// `c[m×n] += aᵀ · b` where `a` is stored `k×m`.
pub fn gemm_tn(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    let at = transpose(k, m, a);
    gemm_nn(m, n, k, &at, b, c);
}

pub fn transpose(rows: usize, cols: usize, src: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Unfolds one image `(ci, h, w)` into a `(ci·kh·kw) × (ho·wo)` column matrix.
fn im2col(x: &[f32], ci: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, col: &mut [f32]) {
    let (ph, pw) = (same_pad(kh), same_pad(kw));
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let n = ho * wo;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((c * kh + ky) * kw + kx) * n..((c * kh + ky) * kw + kx + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into the image.
fn col2im(col: &[f32], ci: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, x: &mut [f32]) {
    let (ph, pw) = (same_pad(kh), same_pad(kw));
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let n = ho * wo;
    for c in 0..ci {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((c * kh + ky) * kw + kx) * n..((c * kh + ky) * kw + kx + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Applies a spatial mask to every `(co, ci)` slice of a kernel.
pub fn masked_kernel(kernel: &[f32], ks: Shape, mask: &[f32]) -> Vec<f32> {
    let area = ks[2] * ks[3];
    kernel.iter().enumerate().map(|(i, &v)| v * mask[i % area]).collect()
}

/// Cross-correlation with zero "same" padding. `ws` is `(co, ci, kh, kw)`.
pub fn conv_forward(x: &[f32], xs: Shape, w: &[f32], ws: Shape, bias: Option<&[f32]>, stride: usize) -> (Vec<f32>, Shape) {
    let [b, ci, h, wd] = xs;
    let [co, _, kh, kw] = ws;
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(wd, stride));
    let n = ho * wo;
    let k = ci * kh * kw;
    let mut out = vec![0.0f32; b * co * n];
    let mut col = vec![0.0f32; k * n];
    for bi in 0..b {
        im2col(&x[bi * ci * h * wd..(bi + 1) * ci * h * wd], ci, h, wd, kh, kw, stride, &mut col);
        let o = &mut out[bi * co * n..(bi + 1) * co * n];
        if let Some(bias) = bias {
            for c in 0..co {
                o[c * n..(c + 1) * n].fill(bias[c]);
            }
        }
        gemm_nn(co, n, k, w, &col, o);
    }
    (out, [b, co, ho, wo])
}

/// Gradient of [`conv_forward`] with respect to its input (also the forward
/// pass of the transposed convolution).
pub fn conv_backward_input(dout: &[f32], xs: Shape, w: &[f32], ws: Shape, stride: usize) -> Vec<f32> {
    let [b, ci, h, wd] = xs;
    let [co, _, kh, kw] = ws;
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(wd, stride));
    let n = ho * wo;
    let k = ci * kh * kw;
    let mut dx = vec![0.0f32; b * ci * h * wd];
    let mut col = vec![0.0f32; k * n];
    for bi in 0..b {
        col.fill(0.0);
        gemm_tn(k, n, co, w, &dout[bi * co * n..(bi + 1) * co * n], &mut col);
        col2im(&col, ci, h, wd, kh, kw, stride, &mut dx[bi * ci * h * wd..(bi + 1) * ci * h * wd]);
    }
    dx
}

/// Gradient of [`conv_forward`] with respect to its kernel.
pub fn conv_backward_weight(x: &[f32], xs: Shape, dout: &[f32], ws: Shape, stride: usize) -> Vec<f32> {
    let [b, ci, h, wd] = xs;
    let [co, _, kh, kw] = ws;
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(wd, stride));
    let n = ho * wo;
    let k = ci * kh * kw;
    // Accumulates dWᵀ = col · doutᵀ so the small operand stays cache-resident.
    let mut dw_t = vec![0.0f32; k * co];
    let mut col = vec![0.0f32; k * n];
    for bi in 0..b {
        im2col(&x[bi * ci * h * wd..(bi + 1) * ci * h * wd], ci, h, wd, kh, kw, stride, &mut col);
        let dout_t = transpose(co, n, &dout[bi * co * n..(bi + 1) * co * n]);
        gemm_nn(k, co, n, &col, &dout_t, &mut dw_t);
    }
    transpose(k, co, &dw_t)
}

/// Per-channel sum over batch and space; the bias gradient.
pub fn channel_sums(dout: &[f32], s: Shape) -> Vec<f32> {
    let [b, c, h, w] = s;
    let n = h * w;
    let mut acc = vec![0.0f64; c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * n;
            acc[ch] += dout[base..base + n].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}
