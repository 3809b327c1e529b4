//! Inner loops shared by the tape operations: im2col/col2im and GEMM glue.

use super::Element;

#[allow(clippy::too_many_arguments)]
pub(crate) fn check_gemm_extents(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    (rsa, csa): (isize, isize),
    b_len: usize,
    (rsb, csb): (isize, isize),
    c_len: usize,
    (rsc, csc): (isize, isize),
) {
    fn last(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
        assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
        if rows == 0 || cols == 0 {
            return 0;
        }
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
    assert!(last(m, k, rsa, csa) <= a_len, "gemm: A too short");
    assert!(last(k, n, rsb, csb) <= b_len, "gemm: B too short");
    assert!(last(m, n, rsc, csc) <= c_len, "gemm: C too short");
}

/// Row-major `c (m×n) = op(a) · op(b)` (+ `c` when `accumulate`).
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored `k×n`
/// (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let a_strides = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, a_strides, b, b_strides, beta, c, (n as isize, 1));
}

/// Geometry of a 2-D convolution over a batched input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn spatial_out(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.spatial_out()
    }

    fn source(&self, oh: usize, ky: usize) -> Option<usize> {
        (oh * self.stride + ky)
            .checked_sub(self.padding)
            .filter(|&v| v < self.height)
    }

    fn source_w(&self, ow: usize, kx: usize) -> Option<usize> {
        (ow * self.stride + kx)
            .checked_sub(self.padding)
            .filter(|&v| v < self.width)
    }
}

/// Unrolls every receptive field into a column: the result is
/// `[C·kh·kw, N·H'·W']`, column index `n·H'W' + oh·W' + ow`.
pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols_n = g.col_cols();
    let l = g.spatial_out();
    let mut cols = vec![T::zero(); g.col_rows() * cols_n];
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_channels + c) * plane..][..plane];
                    let dst = &mut dst_row[n * l..(n + 1) * l];
                    for oh in 0..g.out_h {
                        let Some(ih) = g.source(oh, ky) else { continue };
                        for ow in 0..g.out_w {
                            if let Some(iw) = g.source_w(ow, kx) {
                                dst[oh * g.out_w + ow] = src[ih * g.width + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols_n = g.col_cols();
    let l = g.spatial_out();
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let dst = &mut dx[(n * g.in_channels + c) * plane..][..plane];
                    let src = &src_row[n * l..(n + 1) * l];
                    for oh in 0..g.out_h {
                        let Some(ih) = g.source(oh, ky) else { continue };
                        for ow in 0..g.out_w {
                            if let Some(iw) = g.source_w(ow, kx) {
                                let d = &mut dst[ih * g.width + iw];
                                *d = *d + src[oh * g.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[N, C, L]` → `[C, N·L]`.
pub(crate) fn batch_to_channel_major<T: Element>(x: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * l..][..l];
            out[ch * n * l + b * l..][..l].copy_from_slice(src);
        }
    }
    out
}

/// `[C, N·L]` → `[N, C, L]`.
pub(crate) fn channel_to_batch_major<T: Element>(x: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * l..][..l].copy_from_slice(&x[ch * n * l + b * l..][..l]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn matmul_transpose_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            matmul(m, k, n, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "ta={ta} tb={tb}");
            }
        }
    }

    #[test]
    fn layout_permutations_invert() {
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        let cm = batch_to_channel_major(&x, 2, 3, 4);
        assert_eq!(channel_to_batch_major(&cm, 2, 3, 4), x);
    }
}
