//! Raw numeric kernels over row-major slices. The tape in [`crate::autograd`]
//! wraps these with shape checks and gradient bookkeeping.

use crate::tensor::Scalar;

/// Geometry of a 2-d convolution over NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }
}

/// Unfolds one image `[C,H,W]` into columns `[C*kh*kw, OH*OW]`.
fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut row = 0;
    for c in 0..g.in_c {
        let src = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut row = 0;
    for c in 0..g.in_c {
        let dst = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], k: &[T]) -> Vec<T> {
    let (plane_in, plane_out) = (g.h * g.w, g.out_h() * g.out_w());
    let patch = g.patch();
    let mut out = vec![T::zero(); g.batch * g.out_c * plane_out];
    let mut cols = if is_pointwise(g) {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane_out]
    };
    for b in 0..g.batch {
        let img = &x[b * g.in_c * plane_in..(b + 1) * g.in_c * plane_in];
        let cols_ref: &[T] = if is_pointwise(g) {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        let o = &mut out[b * g.out_c * plane_out..(b + 1) * g.out_c * plane_out];
        T::gemm(
            g.out_c,
            patch,
            plane_out,
            T::one(),
            k,
            patch as isize,
            1,
            cols_ref,
            plane_out as isize,
            1,
            T::zero(),
            o,
            plane_out as isize,
            1,
        );
    }
    out
}

/// Returns `(dx, dk)`; either is skipped when its flag is false.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    k: &[T],
    dout: &[T],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (plane_in, plane_out) = (g.h * g.w, g.out_h() * g.out_w());
    let patch = g.patch();
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dk = want_dk.then(|| vec![T::zero(); k.len()]);
    let pointwise = is_pointwise(g);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { patch * plane_out }];
    let mut dcols = vec![T::zero(); if pointwise || !want_dx { 0 } else { patch * plane_out }];
    for b in 0..g.batch {
        let img = &x[b * g.in_c * plane_in..(b + 1) * g.in_c * plane_in];
        let go = &dout[b * g.out_c * plane_out..(b + 1) * g.out_c * plane_out];
        if let Some(dk) = dk.as_mut() {
            let cols_ref: &[T] = if pointwise {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            // dk[O, patch] += dout[O, P] * cols[patch, P]^T
            T::gemm(
                g.out_c,
                plane_out,
                patch,
                T::one(),
                go,
                plane_out as isize,
                1,
                cols_ref,
                1,
                plane_out as isize,
                T::one(),
                dk,
                patch as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx[b * g.in_c * plane_in..(b + 1) * g.in_c * plane_in];
            // dcols[patch, P] = k[O, patch]^T * dout[O, P]
            let target: &mut [T] = if pointwise { dimg } else { &mut dcols };
            T::gemm(
                patch,
                g.out_c,
                plane_out,
                T::one(),
                k,
                1,
                patch as isize,
                go,
                plane_out as isize,
                1,
                if pointwise { T::one() } else { T::zero() },
                target,
                plane_out as isize,
                1,
            );
            if !pointwise {
                col2im(g, &dcols, dimg);
            }
        }
    }
    (dx, dk)
}

/// Source taps for one output coordinate of a bilinear resize.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Half-pixel (align-corners = false) sampling positions, clamped at the
/// border as in common deep-learning frameworks.
pub fn resize_taps(input: usize, output: usize) -> Vec<Taps> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = src - i0 as f64;
            Taps {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

/// Bilinear resize of `planes` independent `h×w` planes to `oh×ow`.
pub fn resize_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    if (h, w) == (oh, ow) {
        return x.to_vec();
    }
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, yt) in ty.iter().enumerate() {
            let (r0, r1) = (&src[yt.i0 * w..], &src[yt.i1 * w..]);
            let (wy0, wy1) = (T::of(yt.w0), T::of(yt.w1));
            for (ox, xt) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::of(xt.w0), T::of(xt.w1));
                dst[oy * ow + ox] = wy0 * (wx0 * r0[xt.i0] + wx1 * r0[xt.i1])
                    + wy1 * (wx0 * r1[xt.i0] + wx1 * r1[xt.i1]);
            }
        }
    }
    out
}

pub fn resize_backward<T: Scalar>(
    dout: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    if (h, w) == (oh, ow) {
        return dout.to_vec();
    }
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, yt) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(yt.w0), T::of(yt.w1));
            for (ox, xt) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                let (wx0, wx1) = (T::of(xt.w0), T::of(xt.w1));
                dst[yt.i0 * w + xt.i0] += wy0 * wx0 * g;
                dst[yt.i0 * w + xt.i1] += wy0 * wx1 * g;
                dst[yt.i1 * w + xt.i0] += wy1 * wx0 * g;
                dst[yt.i1 * w + xt.i1] += wy1 * wx1 * g;
            }
        }
    }
    dx
}

/// 2×2 average pooling with stride 2 on `planes` planes of `h×w` (even extents).
pub fn avg_pool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x0) = (2 * oy, 2 * ox);
                out[p * oh * ow + oy * ow + ox] = quarter
                    * (src[y * w + x0] + src[y * w + x0 + 1] + src[(y + 1) * w + x0] + src[(y + 1) * w + x0 + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(dout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                dx[p * h * w + y * w + x] = quarter * dout[p * oh * ow + (y / 2) * ow + x / 2];
            }
        }
    }
    dx
}

/// Softmax along the middle axis of an `[outer, len, inner]` view, with the
/// row maximum subtracted before exponentiation.
pub fn softmax_forward<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                y[at(j)] /= sum;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: T = (0..len).map(|j| y[at(j)] * dy[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over `(B, H, W)` of an NCHW buffer,
/// computed in two passes.
pub fn channel_stats<T: Scalar>(x: &[T], batch: usize, channels: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let n = T::of((batch * plane) as f64);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut s = T::zero();
        for b in 0..batch {
            s += x[(b * channels + c) * plane..][..plane].iter().copied().sum::<T>();
        }
        let m = s / n;
        let mut v = T::zero();
        for b in 0..batch {
            for &e in &x[(b * channels + c) * plane..][..plane] {
                v += (e - m) * (e - m);
            }
        }
        mean[c] = m;
        var[c] = v / n;
    }
    (mean, var)
}

/// Mean over a `k×k` window (stride 1, zero padding of `k/2`, padded cells
/// counted in the divisor) for each of `planes` planes.
pub fn box_filter<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let norm = T::of((k * k) as f64);
    let mut out = vec![T::zero(); x.len()];
    // separable: horizontal sums, then vertical sums
    let mut horiz = vec![T::zero(); h * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut s = T::zero();
                for dx in -r..=r {
                    let ix = xx as isize + dx;
                    if ix >= 0 && ix < w as isize {
                        s += src[y * w + ix as usize];
                    }
                }
                horiz[y * w + xx] = s;
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut s = T::zero();
                for dy in -r..=r {
                    let iy = y as isize + dy;
                    if iy >= 0 && iy < h as isize {
                        s += horiz[iy as usize * w + xx];
                    }
                }
                dst[y * w + xx] = s / norm;
            }
        }
    }
    out
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
