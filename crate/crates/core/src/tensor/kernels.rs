//! Slice-level numeric kernels shared by the autodiff ops and by code that
//! works on plain tensors (label pooling, multi-scale resizing).
//!
//! Layouts are row-major. Image-like buffers are `[B, C, H, W]`.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
///
/// `a` is stored as `m x k` (or `k x m` when `trans_a`), `b` as `k x n`
/// (or `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    let a_view = if trans_a {
        ArrayView2::from_shape((k, m), a).expect("gemm lhs").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm lhs")
    };
    let b_view = if trans_b {
        ArrayView2::from_shape((n, k), b).expect("gemm rhs").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm rhs")
    };
    let mut c_view = ArrayViewMut2::from_shape((m, n), c).expect("gemm out");
    general_mat_mul(1.0, &a_view, &b_view, beta, &mut c_view);
}

/// Geometry of a 2-D convolution over a `[B, C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output extent along one axis, or `None` when it would be < 1.
    pub fn out_extent(len: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> Option<usize> {
        if kernel == 0 || stride == 0 || dilation == 0 {
            return None;
        }
        let span = dilation * (kernel - 1) + 1;
        let padded = len + 2 * padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / stride + 1)
    }

    pub fn out_height(&self) -> usize {
        Self::out_extent(self.height, self.kernel_h, self.stride, self.dilation, self.padding).unwrap_or(0)
    }

    pub fn out_width(&self) -> usize {
        Self::out_extent(self.width, self.kernel_w, self.stride, self.dilation, self.padding).unwrap_or(0)
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f64], gx: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let mut row = 0;
    for c in 0..g.in_channels {
        let gxc = &mut gx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            gxc[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn is_pointwise(g: &ConvGeometry) -> bool {
    g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0
}

/// Cross-correlation forward pass.
pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let rows = g.col_rows();
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * plane;
    let mut out = vec![0.0; g.batch * out_size];
    let mut cols = if is_pointwise(g) {
        Vec::new()
    } else {
        vec![0.0; rows * plane]
    };
    for b in 0..g.batch {
        let xb = &x[b * in_size..(b + 1) * in_size];
        let ob = &mut out[b * out_size..(b + 1) * out_size];
        if let Some(bias) = bias {
            for (o, chunk) in ob.chunks_mut(plane).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        let src: &[f64] = if is_pointwise(g) {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        gemm(g.out_channels, rows, plane, w, false, src, false, ob, 1.0);
    }
    out
}

type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

/// Gradients of the convolution with respect to input, weight and bias.
pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    need_x: bool,
    need_w: bool,
    need_bias: bool,
) -> ConvGrads {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let rows = g.col_rows();
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * plane;
    let pointwise = is_pointwise(g);

    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    let mut gb = need_bias.then(|| vec![0.0; g.out_channels]);
    let mut cols = vec![0.0; rows * plane];
    let mut gcols = if pointwise { Vec::new() } else { vec![0.0; rows * plane] };

    for b in 0..g.batch {
        let xb = &x[b * in_size..(b + 1) * in_size];
        let gob = &grad_out[b * out_size..(b + 1) * out_size];
        if let Some(gb) = gb.as_mut() {
            for (o, chunk) in gob.chunks(plane).enumerate() {
                gb[o] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let src: &[f64] = if pointwise {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            gemm(g.out_channels, plane, rows, gob, false, src, true, gw, 1.0);
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx[b * in_size..(b + 1) * in_size];
            if pointwise {
                gemm(rows, g.out_channels, plane, w, true, gob, false, gxb, 1.0);
            } else {
                gemm(rows, g.out_channels, plane, w, true, gob, false, &mut gcols, 0.0);
                col2im(g, &gcols, gxb);
            }
        }
    }
    (gx, gw, gb)
}

/// Non-overlapping `k x k` mean pooling over `[planes, H, W]`.
pub fn avg_pool2d(x: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..h {
            let row = &xp[y * w..(y + 1) * w];
            let orow = &mut op[(y / k) * wo..(y / k + 1) * wo];
            for (xi, v) in row.iter().enumerate() {
                orow[xi / k] += v;
            }
        }
        op.iter_mut().for_each(|v| *v *= norm);
    }
    out
}

pub fn avg_pool2d_backward(grad_out: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let gp = &grad_out[p * ho * wo..(p + 1) * ho * wo];
        let gxp = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xi in 0..w {
                gxp[y * w + xi] = gp[(y / k) * wo + xi / k] * norm;
            }
        }
    }
    gx
}

/// Source taps for align-corners-false linear interpolation along one axis.
fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `[planes, H, W]` to `[planes, H', W']`.
pub fn resize_bilinear(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = xp[y0 * w + x0] * (1.0 - lx) + xp[y0 * w + x1] * lx;
                let bottom = xp[y1 * w + x0] * (1.0 - lx) + xp[y1 * w + x1] * lx;
                op[oy * ow + ox] = top * (1.0 - ly) + bottom * ly;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(grad_out: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let gp = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let gxp = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = gp[oy * ow + ox];
                gxp[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                gxp[y0 * w + x1] += g * (1.0 - ly) * lx;
                gxp[y1 * w + x0] += g * ly * (1.0 - lx);
                gxp[y1 * w + x1] += g * ly * lx;
            }
        }
    }
    gx
}

/// Nearest-neighbour resize of an integer map `[H, W]`.
pub fn resize_nearest<T: Copy>(x: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64).floor() as usize;
        let sy = sy.min(h - 1);
        for ox in 0..ow {
            let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64).floor() as usize;
            out.push(x[sy * w + sx.min(w - 1)]);
        }
    }
    out
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len).map(|a| x[base + a * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..len {
                let e = (x[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                total += e;
            }
            for a in 0..len {
                out[base + a * inner] /= total;
            }
        }
    }
    out
}

pub fn softmax_backward(y: &[f64], grad_out: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len).map(|a| y[base + a * inner] * grad_out[base + a * inner]).sum();
            for a in 0..len {
                let idx = base + a * inner;
                gx[idx] = y[idx] * (grad_out[idx] - dot);
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn out_extent_rejects_oversized_kernels() {
        assert_eq!(ConvGeometry::out_extent(5, 3, 1, 1, 0), Some(3));
        assert_eq!(ConvGeometry::out_extent(64, 3, 2, 1, 1), Some(32));
        assert_eq!(ConvGeometry::out_extent(2, 3, 1, 1, 0), None);
        assert_eq!(ConvGeometry::out_extent(4, 3, 1, 3, 0), None);
    }

    #[test]
    fn nearest_resize_keeps_values() {
        let m = [1u8, 2, 3, 4];
        let up = resize_nearest(&m, 2, 2, 4, 4);
        assert_eq!(up, vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
        assert_eq!(resize_nearest(&up, 4, 4, 2, 2), m.to_vec());
    }
}
