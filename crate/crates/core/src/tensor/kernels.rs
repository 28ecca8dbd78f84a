//! Raw numeric kernels over flat row-major buffers. No shape checking beyond debug asserts;
//! the tape validates shapes before calling in here.

use rayon::prelude::*;

use super::Real;

const PAR_WORK: usize = 1 << 15;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, crow): (usize, &mut [F])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_WORK && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let row = |(i, crow): (usize, &mut [F])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *cv += acc;
        }
    };
    if m * k * n >= PAR_WORK && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let row = |(i, crow): (usize, &mut [F])| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == F::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_WORK && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Spatial geometry of a channels-last 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        batch: usize,
        height: usize,
        width: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if kernel == 0 || stride == 0 {
            return None;
        }
        let (ph, pw) = (height + 2 * padding, width + 2 * padding);
        if ph < kernel || pw < kernel {
            return None;
        }
        Some(ConvGeometry {
            batch,
            height,
            width,
            channels,
            kernel,
            stride,
            padding,
            out_height: (ph - kernel) / stride + 1,
            out_width: (pw - kernel) / stride + 1,
        })
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }

    pub fn col_width(&self) -> usize {
        self.taps() * self.channels
    }

    /// Regular sampling origin (row, col) for output position (oy, ox) and tap (ky, kx).
    #[inline]
    pub fn tap_origin(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> (isize, isize) {
        (
            (oy * self.stride + ky) as isize - self.padding as isize,
            (ox * self.stride + kx) as isize - self.padding as isize,
        )
    }
}

/// Unfold `x[N×H×W×C]` into `[N·Ho·Wo × K·K·C]` columns ordered (ky, kx, c).
pub(crate) fn im2col<F: Real>(x: &[F], g: &ConvGeometry) -> Vec<F> {
    let cw = g.col_width();
    let mut cols = vec![F::ZERO; g.out_positions() * cw];
    let c = g.channels;
    for n in 0..g.batch {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let row = (n * g.out_height + oy) * g.out_width + ox;
                let dst = &mut cols[row * cw..(row + 1) * cw];
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let (iy, ix) = g.tap_origin(oy, ox, ky, kx);
                        if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((n * g.height + iy as usize) * g.width + ix as usize) * c;
                        let t = (ky * g.kernel + kx) * c;
                        dst[t..t + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the input grid.
pub(crate) fn col2im<F: Real>(dcols: &[F], g: &ConvGeometry, dx: &mut [F]) {
    let cw = g.col_width();
    let c = g.channels;
    for n in 0..g.batch {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let row = (n * g.out_height + oy) * g.out_width + ox;
                let src = &dcols[row * cw..(row + 1) * cw];
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let (iy, ix) = g.tap_origin(oy, ox, ky, kx);
                        if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((n * g.height + iy as usize) * g.width + ix as usize) * c;
                        let t = (ky * g.kernel + kx) * c;
                        for (d, &s) in dx[dst..dst + c].iter_mut().zip(&src[t..t + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Integer corner and fractional weights of a bilinear sample at (y, x).
#[inline]
pub fn bilinear_weights<F: Real>(y: F, x: F) -> (isize, isize, F, F) {
    let y0 = y.floor();
    let x0 = x.floor();
    (y0.to_f64() as isize, x0.to_f64() as isize, y - y0, x - x0)
}

#[inline]
fn corner<F: Real>(plane: &[F], h: usize, w: usize, c: usize, y: isize, x: isize) -> Option<&[F]> {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        None
    } else {
        let o = (y as usize * w + x as usize) * c;
        Some(&plane[o..o + c])
    }
}

/// Bilinear sample of an `[H×W×C]` plane at fractional (y, x); out-of-bounds corners read zero.
pub(crate) fn sample_into<F: Real>(plane: &[F], h: usize, w: usize, c: usize, y: F, x: F, out: &mut [F]) {
    let (y0, x0, ly, lx) = bilinear_weights(y, x);
    let hy = F::ONE - ly;
    let hx = F::ONE - lx;
    out.iter_mut().for_each(|v| *v = F::ZERO);
    let corners = [(y0, x0, hy * hx), (y0, x0 + 1, hy * lx), (y0 + 1, x0, ly * hx), (y0 + 1, x0 + 1, ly * lx)];
    for (cy, cx, wt) in corners {
        if let Some(v) = corner(plane, h, w, c, cy, cx) {
            for (o, &s) in out.iter_mut().zip(v) {
                *o += wt * s;
            }
        }
    }
}

/// Backward of [`sample_into`]: accumulates into `dplane` and returns (d/dy, d/dx).
#[allow(clippy::too_many_arguments)]
pub(crate) fn sample_backward<F: Real>(
    plane: &[F],
    h: usize,
    w: usize,
    c: usize,
    y: F,
    x: F,
    dout: &[F],
    dplane: Option<&mut [F]>,
) -> (F, F) {
    let (y0, x0, ly, lx) = bilinear_weights(y, x);
    let hy = F::ONE - ly;
    let hx = F::ONE - lx;
    let zero = vec![F::ZERO; c];
    let v00 = corner(plane, h, w, c, y0, x0).unwrap_or(&zero);
    let v01 = corner(plane, h, w, c, y0, x0 + 1).unwrap_or(&zero);
    let v10 = corner(plane, h, w, c, y0 + 1, x0).unwrap_or(&zero);
    let v11 = corner(plane, h, w, c, y0 + 1, x0 + 1).unwrap_or(&zero);
    let mut gy = F::ZERO;
    let mut gx = F::ZERO;
    for ch in 0..c {
        let d = dout[ch];
        gy += d * (hx * (v10[ch] - v00[ch]) + lx * (v11[ch] - v01[ch]));
        gx += d * (hy * (v01[ch] - v00[ch]) + ly * (v11[ch] - v10[ch]));
    }
    if let Some(dp) = dplane {
        let corners = [(y0, x0, hy * hx), (y0, x0 + 1, hy * lx), (y0 + 1, x0, ly * hx), (y0 + 1, x0 + 1, ly * lx)];
        for (cy, cx, wt) in corners {
            if cy < 0 || cx < 0 || cy >= h as isize || cx >= w as isize {
                continue;
            }
            let o = (cy as usize * w + cx as usize) * c;
            for (g, &d) in dp[o..o + c].iter_mut().zip(dout) {
                *g += wt * d;
            }
        }
    }
    (gy, gx)
}

/// Deformable unfold: like [`im2col`] but tap `k` of output position p samples the input at
/// `origin(p, k) + offsets[p, 2k..2k+2]` (Δy, Δx) with bilinear interpolation.
pub(crate) fn deform_im2col<F: Real>(x: &[F], offsets: &[F], g: &ConvGeometry) -> Vec<F> {
    let cw = g.col_width();
    let c = g.channels;
    let taps = g.taps();
    let plane_len = g.height * g.width * c;
    let mut cols = vec![F::ZERO; g.out_positions() * cw];
    cols.par_chunks_mut(cw).enumerate().for_each(|(row, dst)| {
        let n = row / (g.out_height * g.out_width);
        let oy = (row / g.out_width) % g.out_height;
        let ox = row % g.out_width;
        let plane = &x[n * plane_len..(n + 1) * plane_len];
        let off = &offsets[row * 2 * taps..(row + 1) * 2 * taps];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let k = ky * g.kernel + kx;
                let (iy, ix) = g.tap_origin(oy, ox, ky, kx);
                let sy = F::from_f64(iy as f64) + off[2 * k];
                let sx = F::from_f64(ix as f64) + off[2 * k + 1];
                sample_into(plane, g.height, g.width, c, sy, sx, &mut dst[k * c..(k + 1) * c]);
            }
        }
    });
    cols
}

/// Adjoint of [`deform_im2col`] with respect to the input and the offsets.
pub(crate) fn deform_col2im<F: Real>(
    x: &[F],
    offsets: &[F],
    dcols: &[F],
    g: &ConvGeometry,
    mut dx: Option<&mut [F]>,
    doff: &mut [F],
) {
    let cw = g.col_width();
    let c = g.channels;
    let taps = g.taps();
    let plane_len = g.height * g.width * c;
    for row in 0..g.out_positions() {
        let n = row / (g.out_height * g.out_width);
        let oy = (row / g.out_width) % g.out_height;
        let ox = row % g.out_width;
        let plane = &x[n * plane_len..(n + 1) * plane_len];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let k = ky * g.kernel + kx;
                let (iy, ix) = g.tap_origin(oy, ox, ky, kx);
                let oi = row * 2 * taps + 2 * k;
                let sy = F::from_f64(iy as f64) + offsets[oi];
                let sx = F::from_f64(ix as f64) + offsets[oi + 1];
                let dplane = dx.as_deref_mut().map(|d| &mut d[n * plane_len..(n + 1) * plane_len]);
                let (gy, gx) = sample_backward(
                    plane,
                    g.height,
                    g.width,
                    c,
                    sy,
                    sx,
                    &dcols[row * cw + k * c..row * cw + (k + 1) * c],
                    dplane,
                );
                doff[oi] += gy;
                doff[oi + 1] += gx;
            }
        }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materialize `x` with axes reordered so that output axis `i` is input axis `axes[i]`.
pub(crate) fn permute<F: Real>(x: &[F], shape: &[usize], axes: &[usize]) -> Vec<F> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(x[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// Split `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
