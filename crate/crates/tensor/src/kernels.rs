//! Slice-level forward/adjoint kernels used by the tape.

use crate::scalar::{gemm, Scalar};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an input of `in_shape` is laid over an output of `out_shape`.
#[derive(Clone, Debug)]
pub enum Broadcast {
    Same,
    /// Input repeats with period `len` (input shape is a suffix of the output).
    Cyclic(usize),
    /// Input is constant over runs of `run` output elements.
    Blocks(usize),
    General(Vec<usize>),
}

impl Broadcast {
    pub fn plan(in_shape: &[usize], out_shape: &[usize]) -> Self {
        let n_in = numel(in_shape);
        let n_out = numel(out_shape);
        if n_in == n_out {
            return Broadcast::Same;
        }
        let pad = out_shape.len() - in_shape.len();
        let full: Vec<usize> = std::iter::repeat(1)
            .take(pad)
            .chain(in_shape.iter().copied())
            .collect();
        // suffix match: leading dims broadcast, trailing dims equal
        let first_real = full.iter().position(|&d| d != 1).unwrap_or(full.len());
        if full[first_real..] == out_shape[first_real..] {
            return Broadcast::Cyclic(n_in);
        }
        // prefix match: trailing dims broadcast
        let last_real = full.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
        if full[..last_real] == out_shape[..last_real] {
            return Broadcast::Blocks(numel(&out_shape[last_real..]));
        }
        let in_strides = strides(&full);
        let mut map = Vec::with_capacity(n_out);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..n_out {
            let mut off = 0;
            for d in 0..out_shape.len() {
                if full[d] != 1 {
                    off += idx[d] * in_strides[d];
                }
            }
            map.push(off);
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Broadcast::General(map)
    }

    #[inline]
    pub fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Cyclic(n) => i % n,
            Broadcast::Blocks(run) => i / run,
            Broadcast::General(map) => map[i],
        }
    }

    /// Sum an output-shaped gradient back onto the input layout.
    pub fn reduce<T: Scalar>(&self, grad: &[T], n_in: usize) -> Vec<T> {
        match self {
            Broadcast::Same => grad.to_vec(),
            _ => {
                let mut out = vec![T::zero(); n_in];
                for (i, &g) in grad.iter().enumerate() {
                    out[self.index(i)] += g;
                }
                out
            }
        }
    }
}

/// Permute axes; returns the new data and shape.
pub fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 || n == 0 {
        return (data.to_vec(), out_shape);
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        let mut off = base;
        for _ in 0..inner {
            out.push(data[off]);
            off += inner_stride;
        }
        // advance outer index
        let mut d = rank - 1;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Split a shape around `axis` into (outer, axis extent, inner).
pub fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub fn sum_axis<T: Scalar>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = around_axis(shape, axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = &data[(o * len + a) * inner..(o * len + a + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfold one `C×H×W` image into a `(C·kh·kw) × (oh·ow)` column matrix.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.channels {
        let src = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.channels {
        let dst = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[iy as usize * g.width + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched conv2d forward: `x: N×C×H×W`, `w: O×C×kh×kw` → `N×O×oh×ow`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    batch: usize,
    out_channels: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let img = g.channels * g.height * g.width;
    let rows = g.col_rows();
    let mut out = vec![T::zero(); batch * out_channels * plane];
    let mut cols = vec![T::zero(); rows * plane];
    for n in 0..batch {
        im2col(&x[n * img..(n + 1) * img], g, &mut cols);
        let dst = &mut out[n * out_channels * plane..(n + 1) * out_channels * plane];
        gemm(out_channels, rows, plane, w, false, &cols, false, dst, false);
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                for v in &mut dst[o * plane..(o + 1) * plane] {
                    *v += bo;
                }
            }
        }
    }
    out
}

/// Gradients of conv2d w.r.t. input and weight (bias grad is a plain reduction).
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad: &[T],
    batch: usize,
    out_channels: usize,
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_h() * g.out_w();
    let img = g.channels * g.height * g.width;
    let rows = g.col_rows();
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); rows * plane];
    for n in 0..batch {
        let go = &grad[n * out_channels * plane..(n + 1) * out_channels * plane];
        if let Some(gw) = gw.as_mut() {
            im2col(&x[n * img..(n + 1) * img], g, &mut cols);
            // gw (O×R) += go (O×P) · colsᵀ (P×R)
            gemm(out_channels, plane, rows, go, false, &cols, true, gw, true);
        }
        if let Some(gx) = gx.as_mut() {
            // dcols (R×P) = wᵀ (R×O) · go (O×P)
            gemm(rows, out_channels, plane, w, true, go, false, &mut cols, false);
            col2im(&cols, g, &mut gx[n * img..(n + 1) * img]);
        }
    }
    (gx, gw)
}

/// Depthwise conv forward: `w: C×1×kh×kw`.
pub fn depthwise_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    batch: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, wd) = (g.height, g.width);
    let mut out = vec![T::zero(); batch * g.channels * oh * ow];
    for n in 0..batch {
        for c in 0..g.channels {
            let src = &x[(n * g.channels + c) * h * wd..(n * g.channels + c + 1) * h * wd];
            let k = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let dst = &mut out[(n * g.channels + c) * oh * ow..(n * g.channels + c + 1) * oh * ow];
            let b0 = bias.map_or(T::zero(), |b| b[c]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b0;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += k[ky * g.kw + kx] * src[iy as usize * wd + ix as usize];
                        }
                    }
                    dst[oy * ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad: &[T],
    batch: usize,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, wd) = (g.height, g.width);
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    for n in 0..batch {
        for c in 0..g.channels {
            let base = (n * g.channels + c) * h * wd;
            let src = &x[base..base + h * wd];
            let gsrc = &mut gx[base..base + h * wd];
            let k = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let gk = &mut gw[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let go = &grad[(n * g.channels + c) * oh * ow..(n * g.channels + c + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = go[oy * ow + ox];
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let p = iy as usize * wd + ix as usize;
                            gk[ky * g.kw + kx] += gv * src[p];
                            gsrc[p] += gv * k[ky * g.kw + kx];
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Normalize each contiguous row of length `width`; returns (normalized, rstd per row).
pub fn normalize_rows<T: Scalar>(x: &[T], width: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / width;
    let inv_w = T::one() / T::lit(width as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, &v) in xhat[r * width..(r + 1) * width].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

/// Adjoint of per-row normalization given `dxhat`.
pub fn normalize_rows_backward<T: Scalar>(xhat: &[T], rstd: &[T], dxhat: &[T], width: usize) -> Vec<T> {
    let inv_w = T::one() / T::lit(width as f64);
    let mut dx = vec![T::zero(); xhat.len()];
    for (r, &rs) in rstd.iter().enumerate() {
        let range = r * width..(r + 1) * width;
        let xh = &xhat[range.clone()];
        let dxh = &dxhat[range.clone()];
        let mean_d = dxh.iter().copied().sum::<T>() * inv_w;
        let mean_dx = xh.iter().zip(dxh).map(|(&a, &b)| a * b).sum::<T>() * inv_w;
        for ((o, &a), &b) in dx[range].iter_mut().zip(xh).zip(dxh) {
            *o = rs * (b - mean_d - a * mean_dx);
        }
    }
    dx
}
