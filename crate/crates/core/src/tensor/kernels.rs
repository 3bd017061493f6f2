//! Raw loops and GEMM calls shared by the functional ops and the tape.

/// Row-major GEMM: `c = alpha * op(a) * op(b) + beta * c`, with `op(a)` of
/// shape `m x k` and `op(b)` of shape `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    // SAFETY: the slice lengths above cover every index the strides reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1, same-padded convolution over a batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn columns(&self) -> usize {
        self.batch * self.plane()
    }
}

/// Valid output range `[lo, hi)` along an axis of length `len` for a kernel
/// tap at offset `d` with half-width `pad`.
#[inline]
fn tap_range(d: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (len + pad).saturating_sub(d).min(len);
    (lo, hi.max(lo))
}

/// For one kernel tap, the contiguous flat run `[dst_lo, dst_hi)` of an
/// `H x W` plane whose source index is `p + shift`. Within the run only the
/// columns `x0..x1` are genuine; the rest wrap across row ends.
#[derive(Clone, Copy)]
struct TapRun {
    dst_lo: usize,
    dst_hi: usize,
    shift: isize,
    x0: usize,
    x1: usize,
}

fn tap_run(dy: usize, dx: usize, g: &ConvGeometry) -> Option<TapRun> {
    let (h, w) = (g.height, g.width);
    let (ph, pw) = (g.kernel_h / 2, g.kernel_w / 2);
    let (y0, y1) = tap_range(dy, ph, h);
    let (x0, x1) = tap_range(dx, pw, w);
    if y0 >= y1 || x0 >= x1 {
        return None;
    }
    let shift = (dy as isize - ph as isize) * w as isize + (dx as isize - pw as isize);
    // first and last genuine positions bound the run
    Some(TapRun {
        dst_lo: y0 * w + x0,
        dst_hi: (y1 - 1) * w + x1,
        shift,
        x0,
        x1,
    })
}

/// Unfolds `[N, C, H, W]` into a `[C*kH*kW, N*H*W]` patch matrix with zero padding.
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let w = g.width;
    let plane = g.plane();
    let ncols = g.columns();
    let mut cols = vec![0.0; g.patch_len() * ncols];
    for dy in 0..g.kernel_h {
        for dx in 0..g.kernel_w {
            let Some(run) = tap_run(dy, dx, g) else { continue };
            let src_lo = (run.dst_lo as isize + run.shift) as usize;
            let len = run.dst_hi - run.dst_lo;
            for c in 0..g.in_channels {
                let row = (c * g.kernel_h + dy) * g.kernel_w + dx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &input[(n * g.in_channels + c) * plane..][..plane];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    dst[run.dst_lo..run.dst_hi].copy_from_slice(&src[src_lo..src_lo + len]);
                    if run.x1 - run.x0 < w {
                        clear_wrapped(&mut dst[run.dst_lo..run.dst_hi], run.dst_lo, &run, w);
                    }
                }
            }
        }
    }
    cols
}

/// Zeroes the entries of a run whose column lies outside `x0..x1`.
#[inline]
fn clear_wrapped(seg: &mut [f64], offset: usize, run: &TapRun, w: usize) {
    let end = offset + seg.len();
    let mut row_start = offset - offset % w;
    while row_start < end {
        for x in (0..run.x0).chain(run.x1..w) {
            let p = row_start + x;
            if p >= offset && p < end {
                seg[p - offset] = 0.0;
            }
        }
        row_start += w;
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input
/// grid. Consumes `cols` as scratch space.
pub(crate) fn col2im(mut cols: Vec<f64>, g: &ConvGeometry) -> Vec<f64> {
    let w = g.width;
    let plane = g.plane();
    let ncols = g.columns();
    let mut out = vec![0.0; g.batch * g.in_channels * plane];
    for dy in 0..g.kernel_h {
        for dx in 0..g.kernel_w {
            let Some(run) = tap_run(dy, dx, g) else { continue };
            let dst_lo = (run.dst_lo as isize + run.shift) as usize;
            let len = run.dst_hi - run.dst_lo;
            for c in 0..g.in_channels {
                let row = (c * g.kernel_h + dy) * g.kernel_w + dx;
                let src_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &mut src_row[n * plane..(n + 1) * plane];
                    let seg = &mut src[run.dst_lo..run.dst_hi];
                    if run.x1 - run.x0 < w {
                        clear_wrapped(seg, run.dst_lo, &run, w);
                    }
                    let dst = &mut out[(n * g.in_channels + c) * plane..][..plane];
                    for (o, v) in dst[dst_lo..dst_lo + len].iter_mut().zip(seg.iter()) {
                        *o += v;
                    }
                }
            }
        }
    }
    out
}

/// Forward convolution given the precomputed patch matrix. Returns `[N, C_out, H, W]` data.
pub(crate) fn conv_forward(cols: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let ncols = g.columns();
    let mut mat = vec![0.0; g.out_channels * ncols];
    gemm(
        g.out_channels,
        g.patch_len(),
        ncols,
        kernel,
        false,
        cols,
        false,
        0.0,
        &mut mat,
    );
    let plane = g.plane();
    let mut out = vec![0.0; mat.len()];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let src = &mat[co * ncols + n * plane..][..plane];
            let dst = &mut out[(n * g.out_channels + co) * plane..][..plane];
            let b = bias[co];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    out
}

/// Reorders an `[N, C_out, H, W]` gradient into the `[C_out, N*H*W]` GEMM layout.
pub(crate) fn conv_grad_matrix(grad_out: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plane = g.plane();
    let ncols = g.columns();
    let mut mat = vec![0.0; g.out_channels * ncols];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let src = &grad_out[(n * g.out_channels + co) * plane..][..plane];
            mat[co * ncols + n * plane..][..plane].copy_from_slice(src);
        }
    }
    mat
}

pub(crate) fn dense_forward(
    x: &[f64],
    weights: &[f64],
    bias: &[f64],
    rows: usize,
    features: usize,
    outputs: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * outputs);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    gemm(rows, features, outputs, x, false, weights, false, 1.0, &mut out);
    out
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, 0.0, &mut c);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for all x, c
        let g = ConvGeometry {
            batch: 2,
            in_channels: 3,
            out_channels: 1,
            height: 4,
            width: 5,
            kernel_h: 3,
            kernel_w: 3,
        };
        let x: Vec<f64> = (0..2 * 3 * 20).map(|i| (i as f64 * 0.13).sin()).collect();
        let c: Vec<f64> = (0..g.patch_len() * g.columns())
            .map(|i| (i as f64 * 0.29).cos())
            .collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(c.clone(), &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0).is_finite());
    }
}
