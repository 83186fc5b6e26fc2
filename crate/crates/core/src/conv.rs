//! 2-D convolution (im2col + GEMM) and 2x2 average downsampling kernels for
//! the backbone.

use crate::error::{shape_err, Result};

/// `c = alpha * a·b + beta * c` for row/column-strided matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserted extents keep every strided access inside the slices.
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

/// Geometry of a same-padded stride-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize]) -> Result<Self> {
        let [n, cin, h, w] = *x_shape else {
            return shape_err(format!("conv2d input must be [N,C,H,W], got {x_shape:?}"));
        };
        let [cout, wcin, kh, kw] = *w_shape else {
            return shape_err(format!(
                "conv2d weight must be [Cout,Cin,k,k], got {w_shape:?}"
            ));
        };
        if wcin != cin || kh != kw || kh % 2 == 0 {
            return shape_err(format!(
                "conv2d weight {w_shape:?} incompatible with input {x_shape:?}"
            ));
        }
        Ok(Self {
            n,
            cin,
            cout,
            h,
            w,
            k: kh,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.h, self.w]
    }
}

/// Valid destination column range `[lo, hi)` for a horizontal tap offset.
fn tap_range(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).min(w as isize).max(0) as usize;
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let pad = (k / 2) as isize;
    let hw = g.plane();
    for ci in 0..g.cin {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                let (lo, hi) = tap_range(w, dx);
                for y in 0..h {
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || lo >= hi {
                        out_row.fill(0.0);
                        continue;
                    }
                    let s0 = sy as usize * w;
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let a = (s0 as isize + lo as isize + dx) as usize;
                    out_row[lo..hi].copy_from_slice(&src[a..a + (hi - lo)]);
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx_out: &mut [f64]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let pad = (k / 2) as isize;
    let hw = g.plane();
    for ci in 0..g.cin {
        let dst = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                let (lo, hi) = tap_range(w, dx);
                if lo >= hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let a = (sy as usize * w) as isize + lo as isize + dx;
                    let d = &mut dst[a as usize..a as usize + (hi - lo)];
                    for (o, v) in d.iter_mut().zip(&src[y * w + lo..y * w + hi]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Forward pass; returns the output and the per-sample column buffers.
pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let (kk, hw) = (g.patch(), g.plane());
    let mut cols = vec![0.0; g.n * kk * hw];
    let mut out = vec![0.0; g.n * g.cout * hw];
    for s in 0..g.n {
        let col = &mut cols[s * kk * hw..(s + 1) * kk * hw];
        im2col(&x[s * g.cin * hw..(s + 1) * g.cin * hw], g, col);
        gemm(
            g.cout,
            kk,
            hw,
            weight,
            (kk, 1),
            col,
            (hw, 1),
            0.0,
            &mut out[s * g.cout * hw..(s + 1) * g.cout * hw],
        );
    }
    (out, cols)
}

/// Returns `(dx, dweight)`; `dx` is skipped when `need_dx` is false.
pub(crate) fn conv2d_backward(
    dy: &[f64],
    cols: &[f64],
    weight: &[f64],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let (kk, hw) = (g.patch(), g.plane());
    let mut dw = vec![0.0; g.cout * kk];
    let mut dx = need_dx.then(|| vec![0.0; g.n * g.cin * hw]);
    let mut dcol = vec![0.0; if need_dx { kk * hw } else { 0 }];
    for s in 0..g.n {
        let dys = &dy[s * g.cout * hw..(s + 1) * g.cout * hw];
        let col = &cols[s * kk * hw..(s + 1) * kk * hw];
        gemm(g.cout, hw, kk, dys, (hw, 1), col, (1, hw), 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            gemm(kk, g.cout, hw, weight, (1, kk), dys, (hw, 1), 0.0, &mut dcol);
            col2im(&dcol, g, &mut dx[s * g.cin * hw..(s + 1) * g.cin * hw]);
        }
    }
    (dx, dw)
}

pub(crate) fn downsample2_forward(x: &[f64], shape: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    let [n, c, h, w] = *shape else {
        return shape_err(format!("downsample expects [N,C,H,W], got {shape:?}"));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("downsample needs even H and W, got {shape:?}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x_ in 0..ow {
                let a = 2 * y * w + 2 * x_;
                dst[y * ow + x_] = 0.25 * (src[a] + src[a + 1] + src[a + w] + src[a + w + 1]);
            }
        }
    }
    Ok((out, vec![n, c, oh, ow]))
}

pub(crate) fn downsample2_backward(dy: &[f64], in_shape: &[usize]) -> Vec<f64> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let planes = in_shape[0] * in_shape[1];
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x_ in 0..ow {
                let g = 0.25 * src[y * ow + x_];
                let a = 2 * y * w + 2 * x_;
                dst[a] = g;
                dst[a + 1] = g;
                dst[a + w] = g;
                dst[a + w + 1] = g;
            }
        }
    }
    dx
}
