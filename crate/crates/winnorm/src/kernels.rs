//! Hot numeric kernels: a register-blocked matmul and the im2col-based
//! convolution built on it. Batch-axis parallelism uses fixed-size chunks
//! with an ordered combine, so results are bit-identical for any thread
//! count.

use rayon::prelude::*;

use crate::tensor::{Dims4, Real};

/// Accumulating row-major matmul: c[m x n] += a[m x k] * b[k x n].
/// Four output rows per pass; the inner loop is a contiguous 4-way
/// saxpy over one b row, which vectorizes cleanly.
pub(crate) fn matmul_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut mi = 0;
    while mi + 4 <= m {
        let (c0, rest) = c[mi * n..(mi + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let a0 = &a[mi * k..(mi + 1) * k];
        let a1 = &a[(mi + 1) * k..(mi + 2) * k];
        let a2 = &a[(mi + 2) * k..(mi + 3) * k];
        let a3 = &a[(mi + 3) * k..(mi + 4) * k];
        for ki in 0..k {
            let brow = &b[ki * n..(ki + 1) * n];
            let (x0, x1, x2, x3) = (a0[ki], a1[ki], a2[ki], a3[ki]);
            for ni in 0..n {
                let bv = brow[ni];
                c0[ni] += x0 * bv;
                c1[ni] += x1 * bv;
                c2[ni] += x2 * bv;
                c3[ni] += x3 * bv;
            }
        }
        mi += 4;
    }
    while mi < m {
        let crow = &mut c[mi * n..(mi + 1) * n];
        let arow = &a[mi * k..(mi + 1) * k];
        for ki in 0..k {
            let brow = &b[ki * n..(ki + 1) * n];
            let x = arow[ki];
            for ni in 0..n {
                crow[ni] += x * brow[ni];
            }
        }
        mi += 1;
    }
}

/// Accumulating matmul against a transposed right factor:
/// c[m x n] += a[m x j] * b[n x j]^T. Dot-product form, contiguous in j.
pub(crate) fn matmul_abt_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, j: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * j);
    debug_assert_eq!(b.len(), n * j);
    for mi in 0..m {
        let arow = &a[mi * j..(mi + 1) * j];
        let crow = &mut c[mi * n..(mi + 1) * n];
        for ni in 0..n {
            let brow = &b[ni * j..(ni + 1) * j];
            let mut acc = T::ZERO;
            for (x, y) in arow.iter().zip(brow) {
                acc += *x * *y;
            }
            crow[ni] += acc;
        }
    }
}

pub(crate) fn conv_out_dims(h: usize, w: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - 3) / stride + 1, (w + 2 * pad - 3) / stride + 1)
}

/// Unfold one image (cin, h, w) into the patch matrix (cin*9, ho*wo):
/// row (ci*9 + kh*3 + kw), column (oy*wo + ox) holds
/// f[ci, oy*stride + kh - pad, ox*stride + kw - pad] (zero outside).
pub(crate) fn im2col<T: Real>(
    f: &[T],
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
    pad: usize,
    col: &mut [T],
) {
    let (ho, wo) = conv_out_dims(h, w, stride, pad);
    debug_assert_eq!(col.len(), cin * 9 * ho * wo);
    for ci in 0..cin {
        let plane = &f[ci * h * w..(ci + 1) * h * w];
        for kh in 0..3 {
            for kw in 0..3 {
                let row = &mut col[((ci * 3 + kh) * 3 + kw) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = oy * stride + kh;
                    let out_row = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < pad || iy - pad >= h {
                        for v in out_row.iter_mut() {
                            *v = T::ZERO;
                        }
                        continue;
                    }
                    let iy = iy - pad;
                    let in_row = &plane[iy * w..(iy + 1) * w];
                    if stride == 1 && kw >= pad && w + pad >= kw + wo {
                        // Fully interior fast path: one contiguous copy.
                        out_row.copy_from_slice(&in_row[kw - pad..kw - pad + wo]);
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = ox * stride + kw;
                            *v = if ix < pad || ix - pad >= w {
                                T::ZERO
                            } else {
                                in_row[ix - pad]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Fold the patch matrix back, accumulating into the image gradient.
pub(crate) fn col2im_acc<T: Real>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
    pad: usize,
    df: &mut [T],
) {
    let (ho, wo) = conv_out_dims(h, w, stride, pad);
    debug_assert_eq!(col.len(), cin * 9 * ho * wo);
    for ci in 0..cin {
        let plane = &mut df[ci * h * w..(ci + 1) * h * w];
        for kh in 0..3 {
            for kw in 0..3 {
                let row = &col[((ci * 3 + kh) * 3 + kw) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = oy * stride + kh;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = ox * stride + kw;
                        if ix >= pad && ix - pad < w {
                            dst[ix - pad] += v;
                        }
                    }
                }
            }
        }
    }
}

/// out[n] = kernel-matrix (cout x cin*9) times im2col(f[n]).
pub(crate) fn conv2d_forward<T: Real>(
    f: &[T],
    kmat: &[T],
    out: &mut [T],
    in_dims: Dims4,
    cout: usize,
    stride: usize,
    pad: usize,
) {
    let (_n, cin, h, w) = in_dims;
    let (ho, wo) = conv_out_dims(h, w, stride, pad);
    let kk = cin * 9;
    out.par_chunks_mut(cout * ho * wo).enumerate().for_each(|(ni, out_n)| {
        let mut col = vec![T::ZERO; kk * ho * wo];
        im2col(&f[ni * cin * h * w..(ni + 1) * cin * h * w], cin, h, w, stride, pad, &mut col);
        matmul_acc(out_n, kmat, &col, cout, kk, ho * wo);
    });
}

/// df[n] += fold(kernel^T times gout[n]).
pub(crate) fn conv2d_backward_input<T: Real>(
    gout: &[T],
    kmat: &[T],
    df: &mut [T],
    in_dims: Dims4,
    cout: usize,
    stride: usize,
    pad: usize,
) {
    let (_n, cin, h, w) = in_dims;
    let (ho, wo) = conv_out_dims(h, w, stride, pad);
    let kk = cin * 9;
    // kmat transposed once: (kk, cout).
    let mut kt = vec![T::ZERO; kk * cout];
    for co in 0..cout {
        for r in 0..kk {
            kt[r * cout + co] = kmat[co * kk + r];
        }
    }
    df.par_chunks_mut(cin * h * w).enumerate().for_each(|(ni, df_n)| {
        let mut dcol = vec![T::ZERO; kk * ho * wo];
        let g_n = &gout[ni * cout * ho * wo..(ni + 1) * cout * ho * wo];
        matmul_acc(&mut dcol, &kt, g_n, kk, cout, ho * wo);
        col2im_acc(&dcol, cin, h, w, stride, pad, df_n);
    });
}

/// Fixed chunking of the batch axis; the combine runs in chunk order, so
/// the floating-point reduction shape never depends on thread count.
const KERNEL_GRAD_CHUNK: usize = 8;

/// dk += sum_n gout[n] * im2col(f[n])^T.
pub(crate) fn conv2d_backward_kernel<T: Real>(
    gout: &[T],
    f: &[T],
    dk: &mut [T],
    in_dims: Dims4,
    cout: usize,
    stride: usize,
    pad: usize,
) {
    let (n, cin, h, w) = in_dims;
    let (ho, wo) = conv_out_dims(h, w, stride, pad);
    let kk = cin * 9;
    let chunks: Vec<usize> = (0..n).step_by(KERNEL_GRAD_CHUNK).collect();
    let partials: Vec<Vec<T>> = chunks
        .par_iter()
        .map(|&start| {
            let mut part = vec![T::ZERO; cout * kk];
            let mut col = vec![T::ZERO; kk * ho * wo];
            for ni in start..(start + KERNEL_GRAD_CHUNK).min(n) {
                im2col(&f[ni * cin * h * w..(ni + 1) * cin * h * w], cin, h, w, stride, pad, &mut col);
                let g_n = &gout[ni * cout * ho * wo..(ni + 1) * cout * ho * wo];
                matmul_abt_acc(&mut part, g_n, &col, cout, ho * wo, kk);
            }
            part
        })
        .collect();
    for part in partials {
        for (d, p) in dk.iter_mut().zip(part) {
            *d += p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn matmul_matches_naive() {
        let mut rng = RngStream::new(5);
        for (m, k, n) in [(1, 1, 1), (4, 3, 5), (7, 18, 11), (12, 27, 64)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.uniform() - 0.5).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.uniform() - 0.5).collect();
            let mut c = vec![0.0; m * n];
            matmul_acc(&mut c, &a, &b, m, k, n);
            for mi in 0..m {
                for ni in 0..n {
                    let want: f64 = (0..k).map(|ki| a[mi * k + ki] * b[ki * n + ni]).sum();
                    assert!((c[mi * n + ni] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_abt_matches_naive() {
        let mut rng = RngStream::new(6);
        let (m, j, n) = (5, 13, 7);
        let a: Vec<f64> = (0..m * j).map(|_| rng.uniform() - 0.5).collect();
        let b: Vec<f64> = (0..n * j).map(|_| rng.uniform() - 0.5).collect();
        let mut c = vec![0.0; m * n];
        matmul_abt_acc(&mut c, &a, &b, m, j, n);
        for mi in 0..m {
            for ni in 0..n {
                let want: f64 = (0..j).map(|ji| a[mi * j + ji] * b[ni * j + ji]).sum();
                assert!((c[mi * n + ni] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(f), c> == <f, col2im(c)> for random c: the fold is the
        // exact transpose of the unfold.
        let mut rng = RngStream::new(7);
        for (stride, pad) in [(1, 1), (1, 0), (2, 1), (2, 0)] {
            let (cin, h, w) = (2, 6, 5);
            let (ho, wo) = conv_out_dims(h, w, stride, pad);
            let f: Vec<f64> = (0..cin * h * w).map(|_| rng.uniform() - 0.5).collect();
            let c: Vec<f64> = (0..cin * 9 * ho * wo).map(|_| rng.uniform() - 0.5).collect();
            let mut col = vec![0.0; cin * 9 * ho * wo];
            im2col(&f, cin, h, w, stride, pad, &mut col);
            let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
            let mut folded = vec![0.0; cin * h * w];
            col2im_acc(&c, cin, h, w, stride, pad, &mut folded);
            let rhs: f64 = f.iter().zip(&folded).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "stride {stride} pad {pad}");
        }
    }
}
