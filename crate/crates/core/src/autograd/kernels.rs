//! Forward/backward kernels for the spatial ops on NCHW tensors.

use super::tensor::{gemm, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
        Self {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col<F: Real>(x: &[F], g: &ConvGeom, col: &mut [F]) {
    let cols = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *d = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(col: &[F], g: &ConvGeom, dx: &mut [F]) {
    let cols = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x (N,Ci,H,W) ⋆ w (Co,Ci,kh,kw)` without bias.
pub fn conv2d_forward<F: Real>(x: &Tensor<F>, w: &Tensor<F>, stride: usize, pad: usize) -> Tensor<F> {
    let (n, ci, h, wd) = x.dims4();
    let (co, wci, kh, kw) = w.dims4();
    assert_eq!(ci, wci, "conv2d: input has {ci} channels, weight expects {wci}");
    let g = ConvGeom::new(ci, h, wd, kh, kw, stride, pad);
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = vec![F::zero(); n * co * cols];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); rows * cols] };
    for b in 0..n {
        let xb = &x.data()[b * ci * h * wd..(b + 1) * ci * h * wd];
        let yb = &mut out[b * co * cols..(b + 1) * co * cols];
        if g.is_pointwise() {
            gemm(false, false, co, cols, rows, w.data(), xb, yb, false);
        } else {
            im2col(xb, &g, &mut col);
            gemm(false, false, co, cols, rows, w.data(), &col, yb, false);
        }
    }
    Tensor::from_vec(&[n, co, g.h_out, g.w_out], out)
}

/// Returns `(dx, dw)`, each only when requested.
pub fn conv2d_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    gy: &Tensor<F>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>) {
    let (n, ci, h, wd) = x.dims4();
    let (co, _, kh, kw) = w.dims4();
    let g = ConvGeom::new(ci, h, wd, kh, kw, stride, pad);
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut dx = need_dx.then(|| vec![F::zero(); x.numel()]);
    let mut dw = need_dw.then(|| vec![F::zero(); w.numel()]);
    let mut col = vec![F::zero(); rows * cols];
    for b in 0..n {
        let xb = &x.data()[b * ci * h * wd..(b + 1) * ci * h * wd];
        let gb = &gy.data()[b * co * cols..(b + 1) * co * cols];
        if let Some(dw) = dw.as_mut() {
            if g.is_pointwise() {
                gemm(false, true, co, rows, cols, gb, xb, dw, true);
            } else {
                im2col(xb, &g, &mut col);
                gemm(false, true, co, rows, cols, gb, &col, dw, true);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * ci * h * wd..(b + 1) * ci * h * wd];
            if g.is_pointwise() {
                gemm(true, false, rows, cols, co, w.data(), gb, dxb, true);
            } else {
                gemm(true, false, rows, cols, co, w.data(), gb, &mut col, false);
                col2im(&col, &g, dxb);
            }
        }
    }
    (
        dx.map(|d| Tensor::from_vec(x.shape(), d)),
        dw.map(|d| Tensor::from_vec(w.shape(), d)),
    )
}

/// 2×2 stride-2 transposed convolution, `w` laid out `(Ci,Co,2,2)`.
pub fn conv_transpose2x2_forward<F: Real>(x: &Tensor<F>, w: &Tensor<F>) -> Tensor<F> {
    let (n, ci, h, wd) = x.dims4();
    let (wci, co, kh, kw) = w.dims4();
    assert_eq!((wci, kh, kw), (ci, 2, 2), "conv_transpose2x2: bad weight shape {:?}", w.shape());
    let hw = h * wd;
    let mut tmp = vec![F::zero(); co * 4 * hw];
    let mut out = vec![F::zero(); n * co * 4 * hw];
    for b in 0..n {
        let xb = &x.data()[b * ci * hw..(b + 1) * ci * hw];
        gemm(true, false, co * 4, hw, ci, w.data(), xb, &mut tmp, false);
        let yb = &mut out[b * co * 4 * hw..(b + 1) * co * 4 * hw];
        for c in 0..co {
            for a in 0..2 {
                for bb in 0..2 {
                    let src = &tmp[(c * 4 + a * 2 + bb) * hw..(c * 4 + a * 2 + bb + 1) * hw];
                    for i in 0..h {
                        let row = &mut yb[(c * 2 * h + 2 * i + a) * 2 * wd..][..2 * wd];
                        for j in 0..wd {
                            row[2 * j + bb] = src[i * wd + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, 2 * h, 2 * wd], out)
}

pub fn conv_transpose2x2_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    gy: &Tensor<F>,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>) {
    let (n, ci, h, wd) = x.dims4();
    let (_, co, _, _) = w.dims4();
    let hw = h * wd;
    let mut gathered = vec![F::zero(); co * 4 * hw];
    let mut dx = need_dx.then(|| vec![F::zero(); x.numel()]);
    let mut dw = need_dw.then(|| vec![F::zero(); w.numel()]);
    for b in 0..n {
        let gb = &gy.data()[b * co * 4 * hw..(b + 1) * co * 4 * hw];
        for c in 0..co {
            for a in 0..2 {
                for bb in 0..2 {
                    let dst = &mut gathered[(c * 4 + a * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        let row = &gb[(c * 2 * h + 2 * i + a) * 2 * wd..][..2 * wd];
                        for j in 0..wd {
                            dst[i * wd + j] = row[2 * j + bb];
                        }
                    }
                }
            }
        }
        let xb = &x.data()[b * ci * hw..(b + 1) * ci * hw];
        if let Some(dx) = dx.as_mut() {
            gemm(false, false, ci, hw, co * 4, w.data(), &gathered, &mut dx[b * ci * hw..(b + 1) * ci * hw], false);
        }
        if let Some(dw) = dw.as_mut() {
            gemm(false, true, ci, co * 4, hw, xb, &gathered, dw, true);
        }
    }
    (
        dx.map(|d| Tensor::from_vec(x.shape(), d)),
        dw.map(|d| Tensor::from_vec(w.shape(), d)),
    )
}

/// 2×2 stride-2 max pooling; also returns the flat input index of each maximum.
pub fn max_pool2_forward<F: Real>(x: &Tensor<F>) -> (Tensor<F>, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let cands = [
                    base + 2 * i * w + 2 * j,
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = cands[0];
                for &k in &cands[1..] {
                    if xd[k] > xd[best] {
                        best = k;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    (Tensor::from_vec(&[n, c, ho, wo], out), arg)
}

fn adaptive_bounds(len: usize, out: usize, i: usize) -> (usize, usize) {
    let start = (i * len) / out;
    let end = ((i + 1) * len + out - 1) / out;
    (start, end)
}

/// Adaptive average pooling with the usual `floor(i·L/O) .. ceil((i+1)·L/O)` bins.
pub fn adaptive_avg_pool_forward<F: Real>(x: &Tensor<F>, oh: usize, ow: usize) -> Tensor<F> {
    let (n, c, h, w) = x.dims4();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            let (y0, y1) = adaptive_bounds(h, oh, i);
            for j in 0..ow {
                let (x0, x1) = adaptive_bounds(w, ow, j);
                let mut acc = F::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += xd[base + y * w + xx];
                    }
                }
                out.push(acc / F::of(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn adaptive_avg_pool_backward<F: Real>(x_shape: &[usize], gy: &Tensor<F>) -> Tensor<F> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, _, oh, ow) = gy.dims4();
    let mut dx = vec![F::zero(); n * c * h * w];
    let gd = gy.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            let (y0, y1) = adaptive_bounds(h, oh, i);
            for j in 0..ow {
                let (x0, x1) = adaptive_bounds(w, ow, j);
                let share = gd[(plane * oh + i) * ow + j] / F::of(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dx[base + y * w + xx] += share;
                    }
                }
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4();
        let (co, _, kh, kw) = w.dims4();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (i * stride + ky) as isize - pad as isize;
                                    let ix = (j * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((b * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * ci + c) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((b * co + o) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, co, ho, wo], out)
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 7 % 13) as f64 - 6.0) * scale).collect())
    }

    #[test]
    fn conv_matches_naive() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let x = ramp(&[2, 3, 6, 5], 0.1);
            let w = ramp(&[4, 3, k, k], 0.05);
            let fast = conv2d_forward(&x, &w, stride, pad);
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_transpose_places_kernel() {
        // single input pixel value 2, one in/out channel: output is 2*kernel
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0f64]);
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = conv_transpose2x2_forward(&x, &w);
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn adaptive_pool_upsamples_and_averages() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let down = adaptive_avg_pool_forward(&x, 1, 1);
        assert_eq!(down.data(), &[2.5]);
        let up = adaptive_avg_pool_forward(&x, 4, 4);
        assert_eq!(up.data()[0], 1.0);
        assert_eq!(up.data()[15], 4.0);
        let uneven = adaptive_avg_pool_forward(&Tensor::from_vec(&[1, 1, 1, 3], vec![1.0f64, 2.0, 3.0]), 1, 2);
        assert_eq!(uneven.data(), &[1.5, 2.5]);
    }

    #[test]
    fn max_pool_picks_maximum() {
        let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0f64, 5.0, 0.0, -1.0, 3.0, 2.0, -2.0, -3.0]);
        let (y, arg) = max_pool2_forward(&x);
        assert_eq!(y.data(), &[5.0, 0.0]);
        assert_eq!(arg, vec![1, 2]);
    }
}
