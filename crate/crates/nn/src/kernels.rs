//! Dense kernels shared by the graph ops and the inference paths.

use crate::Float;

/// Output spatial extent of a convolution.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= kernel, "kernel larger than padded input");
    (size + 2 * pad - kernel) / stride + 1
}

/// Geometry of one 2-D convolution, used by im2col / col2im.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: conv_out_size(height, kernel, stride, pad),
            out_w: conv_out_size(width, kernel, stride, pad),
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1x1 stride-1 unpadded convolutions can use the image as its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one CHW image into a `[C*k*k, out_h*out_w]` column matrix.
pub fn im2col<T: Float>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * ncols);
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst_row.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a column matrix back into a CHW image.
pub fn col2im<T: Float>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let ncols = g.col_cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch of NCHW images. `weight` is `[Cout, Cin, k, k]`.
pub fn conv2d_forward<T: Float>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_channels * g.col_cols();
    let mut out = vec![T::ZERO; batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; g.col_rows() * g.col_cols()]
    };
    for n in 0..batch {
        let img = &x[n * in_len..(n + 1) * in_len];
        let col_src: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut cols);
            &cols
        };
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        let ncols = g.col_cols() as isize;
        T::gemm(
            out_channels,
            g.col_rows(),
            g.col_cols(),
            T::ONE,
            (weight, g.col_rows() as isize, 1),
            (col_src, ncols, 1),
            T::ZERO,
            (dst, ncols, 1),
        );
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut dst[co * g.col_cols()..(co + 1) * g.col_cols()] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each output is only computed when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Float>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    out_channels: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_channels * g.col_cols();
    let ncols = g.col_cols();
    let mut cols = vec![T::ZERO; g.col_rows() * ncols];
    let mut dcols = vec![T::ZERO; g.col_rows() * ncols];
    for n in 0..batch {
        let img = &x[n * in_len..(n + 1) * in_len];
        let dy = &dout[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dy[co * ncols..(co + 1) * ncols].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let col_src: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(img, g, &mut cols);
                &cols
            };
            // dW[Cout, CKK] += dY[Cout, HW] @ cols^T
            T::gemm(
                out_channels,
                ncols,
                g.col_rows(),
                T::ONE,
                (dy, ncols as isize, 1),
                (col_src, 1, ncols as isize),
                T::ONE,
                (dw, g.col_rows() as isize, 1),
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dimg = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(
                    g.col_rows(),
                    out_channels,
                    ncols,
                    T::ONE,
                    (weight, 1, g.col_rows() as isize),
                    (dy, ncols as isize, 1),
                    T::ONE,
                    (dimg, ncols as isize, 1),
                );
            } else {
                // dcols[CKK, HW] = W^T @ dY
                T::gemm(
                    g.col_rows(),
                    out_channels,
                    ncols,
                    T::ONE,
                    (weight, 1, g.col_rows() as isize),
                    (dy, ncols as isize, 1),
                    T::ZERO,
                    (&mut dcols, ncols as isize, 1),
                );
                col2im(&dcols, g, dimg);
            }
        }
    }
}

/// Normalization statistics over contiguous groups of `group_len` elements.
pub fn group_stats<T: Float>(x: &[T], group_len: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let groups = x.len() / group_len;
    let mut mean = Vec::with_capacity(groups);
    let mut rstd = Vec::with_capacity(groups);
    let inv = T::from_f64(1.0 / group_len as f64);
    for chunk in x.chunks_exact(group_len) {
        let m = chunk.iter().copied().sum::<T>() * inv;
        let var = chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv;
        mean.push(m);
        rstd.push(T::ONE / (var + T::from_f64(eps)).sqrt());
    }
    (mean, rstd)
}

/// `dx` for a normalization `xhat = (x - mean) * rstd`, given `dxhat` over one group.
pub fn norm_backward_group<T: Float>(x: &[T], dxhat: &[T], mean: T, rstd: T, dx: &mut [T]) {
    let n = T::from_f64(x.len() as f64);
    let mut sum_d = T::ZERO;
    let mut sum_dx = T::ZERO;
    for (&xi, &di) in x.iter().zip(dxhat) {
        let xh = (xi - mean) * rstd;
        sum_d += di;
        sum_dx += di * xh;
    }
    let md = sum_d / n;
    let mdx = sum_dx / n;
    for ((o, &xi), &di) in dx.iter_mut().zip(x).zip(dxhat) {
        let xh = (xi - mean) * rstd;
        *o += rstd * (di - md - xh * mdx);
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::from_f64(f64::NEG_INFINITY), T::max);
    let mut total = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn silu<T: Float>(x: T) -> T {
    x / (T::ONE + (-x).exp())
}

pub fn silu_grad<T: Float>(x: T) -> T {
    let s = T::ONE / (T::ONE + (-x).exp());
    s * (T::ONE + x * (T::ONE - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + T::from_f64(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], g: &ConvGeom, w: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * g.out_h * g.out_w];
        for co in 0..cout {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for c in 0..g.channels {
                        for ki in 0..g.kernel {
                            for kj in 0..g.kernel {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                acc += x[(c * g.height + iy as usize) * g.width + ix as usize]
                                    * w[((co * g.channels + c) * g.kernel + ki) * g.kernel + kj];
                            }
                        }
                    }
                    out[(co * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let g = ConvGeom::new(2, 5, 6, k, stride, pad);
            let x: Vec<f64> = (0..2 * 5 * 6).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
            let got = conv2d_forward(&x, 1, &g, &w, None, 3);
            let want = naive_conv(&x, &g, &w, 3);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::new(2, 4, 5, 3, 2, 1);
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn activation_derivatives_match_central_differences() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let ds = (silu(x + h) - silu(x - h)) / (2.0 * h);
            let dg = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((ds - silu_grad(x)).abs() < 1e-8);
            assert!((dg - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
