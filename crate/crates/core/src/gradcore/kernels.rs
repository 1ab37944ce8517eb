//! Raw numeric kernels on row-major slices. NCHW layout throughout.
//!
//! The three convolution kernels are the three partial derivatives of the
//! trilinear form `<conv(x, w), g>`, which is what lets the graph express
//! every convolution backward pass in terms of the other two.

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let olen = oh * ow;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * olen..(row + 1) * olen];
                for i in 0..oh {
                    let r = (i * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[i * ow..(i + 1) * ow];
                    if r < 0 || r >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[r as usize * g.w..(r as usize + 1) * g.w];
                    for (j, out) in line.iter_mut().enumerate() {
                        let col = (j * g.stride + kj) as isize - g.pad as isize;
                        *out = if col < 0 || col >= g.w as isize { 0.0 } else { src[col as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let olen = oh * ow;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * olen..(row + 1) * olen];
                for i in 0..oh {
                    let r = (i * g.stride + ki) as isize - g.pad as isize;
                    if r < 0 || r >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[r as usize * g.w..(r as usize + 1) * g.w];
                    for j in 0..ow {
                        let col = (j * g.stride + kj) as isize - g.pad as isize;
                        if col >= 0 && col < g.w as isize {
                            dst[col as usize] += src[i * ow + j];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = alpha·op(a) (m×k) · op(b) (k×n) + beta·c`, all row-major with
/// explicit strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides above address only elements inside `a`, `b` and `c`
    // for the given extents; callers pass slices sized exactly to m·k, k·n, m·n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain row-major matrix product `(m×k)·(k×n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), 0.0, &mut out);
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Forward correlation: `x [n,c,h,w] ⋆ w [o,c,k,k] -> [n,o,oh,ow]`.
pub fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let olen = g.out_len();
    let mut cols = vec![0.0; plen * olen];
    let mut out = vec![0.0; g.n * g.c_out * olen];
    let in_len = g.c_in * g.h * g.w;
    for b in 0..g.n {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
        let dst = &mut out[b * g.c_out * olen..(b + 1) * g.c_out * olen];
        gemm(g.c_out, plen, olen, w, (plen as isize, 1), &cols, (olen as isize, 1), 0.0, dst);
    }
    out
}

/// Adjoint of [`conv2d`] in `x`: maps `g [n,o,oh,ow]` back to `[n,c,h,w]`.
pub fn conv2d_input_grad(grad: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let olen = g.out_len();
    let in_len = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; plen * olen];
    let mut out = vec![0.0; g.n * in_len];
    for b in 0..g.n {
        let gb = &grad[b * g.c_out * olen..(b + 1) * g.c_out * olen];
        // cols = wᵀ · g_b
        gemm(plen, g.c_out, olen, w, (1, plen as isize), gb, (olen as isize, 1), 0.0, &mut cols);
        col2im_add(&cols, g, &mut out[b * in_len..(b + 1) * in_len]);
    }
    out
}

/// Adjoint of [`conv2d`] in `w`: `Σ_b g_b · cols(x_b)ᵀ`, shape `[o,c,k,k]`.
pub fn conv2d_weight_grad(x: &[f64], grad: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let olen = g.out_len();
    let in_len = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; plen * olen];
    let mut out = vec![0.0; g.c_out * plen];
    for b in 0..g.n {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
        let gb = &grad[b * g.c_out * olen..(b + 1) * g.c_out * olen];
        let beta = if b == 0 { 0.0 } else { 1.0 };
        gemm(g.c_out, olen, plen, gb, (olen as isize, 1), &cols, (1, olen as isize), beta, &mut out);
    }
    out
}

/// Nearest-neighbour 2× upsampling of the trailing two axes.
pub fn upsample2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

/// 2×2 block sums; the adjoint of [`upsample2`]. `h`, `w` are input extents.
pub fn sum_pool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..h {
            for j in 0..w {
                dst[(i / 2) * ow + j / 2] += src[i * w + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.n * g.c_out * oh * ow];
        for b in 0..g.n {
            for o in 0..g.c_out {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..g.c_in {
                            for ki in 0..g.k {
                                for kj in 0..g.k {
                                    let r = (i * g.stride + ki) as isize - g.pad as isize;
                                    let s = (j * g.stride + kj) as isize - g.pad as isize;
                                    if r >= 0 && s >= 0 && (r as usize) < g.h && (s as usize) < g.w {
                                        acc += x[((b * g.c_in + c) * g.h + r as usize) * g.w + s as usize]
                                            * w[((o * g.c_in + c) * g.k + ki) * g.k + kj];
                                    }
                                }
                            }
                        }
                        out[((b * g.c_out + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5)] {
            let g = ConvGeom { n: 2, c_in: 3, h: 7, w: 6, c_out: 4, k, stride, pad };
            let x = pseudo(2 * 3 * 7 * 6, 1);
            let w = pseudo(4 * 3 * k * k, 2);
            let fast = conv2d(&x, &w, &g);
            let slow = naive_conv(&x, &w, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        let g = ConvGeom { n: 2, c_in: 2, h: 8, w: 8, c_out: 3, k: 3, stride: 2, pad: 1 };
        let x = pseudo(2 * 2 * 64, 3);
        let w = pseudo(3 * 2 * 9, 4);
        let gr = pseudo(2 * 3 * g.out_h() * g.out_w(), 5);
        let y = conv2d(&x, &w, &g);
        let lhs: f64 = y.iter().zip(&gr).map(|(a, b)| a * b).sum();
        let gx = conv2d_input_grad(&gr, &w, &g);
        let via_x: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let gw = conv2d_weight_grad(&x, &gr, &g);
        let via_w: f64 = gw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-12);
        assert!((lhs - via_w).abs() < 1e-12);
    }

    #[test]
    fn upsample_and_sum_pool_are_adjoint() {
        let x = pseudo(2 * 3 * 4, 9);
        let y = pseudo(2 * 6 * 8, 10);
        let up = upsample2(&x, 2, 3, 4);
        let down = sum_pool2(&y, 2, 6, 8);
        let a: f64 = up.iter().zip(&y).map(|(p, q)| p * q).sum();
        let b: f64 = down.iter().zip(&x).map(|(p, q)| p * q).sum();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        assert_eq!(transpose(&a, 2, 3), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
