//! Cross-correlation kernels (im2col + gemm) shared by the tape.

use super::Scalar;
use crate::error::{shape_err, Result};

/// Geometry of a zero-padded 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("input must be [B,C,H,W], got {input:?}"),
            ));
        }
        if weight.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("weight must be [O,C,k,k], got {weight:?}"),
            ));
        }
        let (b, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != c {
            return Err(shape_err(
                "conv2d",
                format!("axis 1: input has {c} channels, weight expects {wc}"),
            ));
        }
        if kh != kw {
            return Err(shape_err(
                "conv2d",
                format!("axes 2,3: kernel must be square, got {kh}x{kw}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(shape_err(
                "conv2d",
                format!("axes 2,3: kernel {kh} exceeds padded extent {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(Self {
            batch: b,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel: kh,
            stride,
            pad,
            out_height: (h + 2 * pad - kh) / stride + 1,
            out_width: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_height, self.out_width]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation: `y[b,o] = sum_c w[o,c] (*) x[b,c]`.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    let mut col = vec![T::zero(); patch * plane];
    for b in 0..g.batch {
        im2col(g, &x[b * g.in_sample()..(b + 1) * g.in_sample()], &mut col);
        let y = &mut out[b * g.out_channels * plane..(b + 1) * g.out_channels * plane];
        T::gemm(
            false,
            false,
            g.out_channels,
            plane,
            patch,
            T::one(),
            w,
            &col,
            T::zero(),
            y,
        );
    }
    out
}

/// Gradients of the cross-correlation with respect to input and weight.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * g.in_sample()]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.out_channels * patch]);
    let mut col = vec![T::zero(); patch * plane];
    for b in 0..g.batch {
        let dyb = &dy[b * g.out_channels * plane..(b + 1) * g.out_channels * plane];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[b * g.in_sample()..(b + 1) * g.in_sample()], &mut col);
            // dw[o, p] += dy[o, q] col[p, q]
            T::gemm(
                false,
                true,
                g.out_channels,
                patch,
                plane,
                T::one(),
                dyb,
                &col,
                T::one(),
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcol[p, q] = w[o, p] dy[o, q]
            T::gemm(
                true,
                false,
                patch,
                plane,
                g.out_channels,
                T::one(),
                w,
                dyb,
                T::zero(),
                &mut col,
            );
            col2im(g, &col, &mut dx[b * g.in_sample()..(b + 1) * g.in_sample()]);
        }
    }
    (dx, dw)
}
