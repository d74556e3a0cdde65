//! Selective state-space scan and its four-direction 2-D extension.
//!
//! Per channel `d` and state slot `s` the recurrence is
//!
//! ```text
//! h[l] = exp(delta[l] * A) * h[l-1] + delta[l] * B[l] * u[l]
//! y[l] = <C[l], h[l]> + d_skip * u[l]
//! ```
//!
//! with `A = -exp(a_log)`, so every decay factor lies in `(0, 1)` whenever
//! `delta > 0`.
//!
//! Tensors may carry any number of leading batch axes: `u`, `delta` are
//! `[.., L, D]`, `b`, `c` are `[.., L, S]`, `a_log` is `[D, S]` and `d_skip` is `[D]`.

use rand::Rng;
use rayon::prelude::*;
use vadet_tensor::{CustomOp, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::trunc_normal;

pub const DEFAULT_CHUNK: usize = 64;
pub const DEFAULT_STATE: usize = 16;
/// Added to every learned step size so it stays strictly positive.
pub const DELTA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl ScanDims {
    pub fn infer<T: Scalar>(
        u: &Tensor<T>,
        delta: &Tensor<T>,
        a_log: &Tensor<T>,
        b: &Tensor<T>,
        c: &Tensor<T>,
        d_skip: &Tensor<T>,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::ScanShape(msg));
        if u.rank() < 2 {
            return bad(format!("u must be [.., L, D], got {:?}", u.shape()));
        }
        if delta.shape() != u.shape() {
            return bad(format!("delta {:?} vs u {:?}", delta.shape(), u.shape()));
        }
        let r = u.rank();
        let (len, channels) = (u.shape()[r - 2], u.shape()[r - 1]);
        if a_log.rank() != 2 || a_log.shape()[0] != channels {
            return bad(format!("a_log {:?} for {channels} channels", a_log.shape()));
        }
        let state = a_log.shape()[1];
        let mut want = u.shape()[..r - 1].to_vec();
        want.push(state);
        if b.shape() != want.as_slice() || c.shape() != want.as_slice() {
            return bad(format!("b {:?}, c {:?}, expected {want:?}", b.shape(), c.shape()));
        }
        if d_skip.shape() != [channels] {
            return bad(format!("d_skip {:?} for {channels} channels", d_skip.shape()));
        }
        let batch = u.shape()[..r - 2].iter().product();
        Ok(Self {
            batch,
            len,
            channels,
            state,
        })
    }
}

fn check_delta<T: Scalar>(delta: &[T], channels: usize) -> Result<()> {
    for (i, &v) in delta.iter().enumerate() {
        if !(v > T::zero()) {
            return Err(Error::NonpositiveDelta {
                step: (i / channels),
                channel: i % channels,
                value: v.as_f64(),
            });
        }
    }
    Ok(())
}

/// Strictly sequential reference scan.
pub fn selective_scan_naive<T: Scalar>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dims = ScanDims::infer(u, delta, a_log, b, c, d_skip)?;
    check_delta(delta.data(), dims.channels)?;
    let ScanDims {
        batch,
        len,
        channels: nd,
        state: ns,
    } = dims;
    let a: Vec<T> = a_log.data().iter().map(|&v| -v.exp()).collect();
    let dsk = d_skip.data();
    let mut y = vec![T::zero(); u.numel()];
    let mut h = vec![T::zero(); nd * ns];
    for bi in 0..batch {
        let u = &u.data()[bi * len * nd..(bi + 1) * len * nd];
        let dt = &delta.data()[bi * len * nd..(bi + 1) * len * nd];
        let bm = &b.data()[bi * len * ns..(bi + 1) * len * ns];
        let cm = &c.data()[bi * len * ns..(bi + 1) * len * ns];
        let y = &mut y[bi * len * nd..(bi + 1) * len * nd];
        h.fill(T::zero());
        for l in 0..len {
            for d in 0..nd {
                let (step, x) = (dt[l * nd + d], u[l * nd + d]);
                let mut acc = T::zero();
                for s in 0..ns {
                    let abar = (step * a[d * ns + s]).exp();
                    let hs = &mut h[d * ns + s];
                    *hs = abar * *hs + step * bm[l * ns + s] * x;
                    acc += cm[l * ns + s] * *hs;
                }
                y[l * nd + d] = acc + dsk[d] * x;
            }
        }
    }
    Ok(Tensor::new(u.shape().to_vec(), y)?)
}

/// Chunked scan with the default chunk length.
pub fn selective_scan_fast<T: Scalar>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    selective_scan_chunked(u, delta, a_log, b, c, d_skip, DEFAULT_CHUNK)
}

/// Chunked scan: every chunk is scanned from a zero state while recording its
/// running decay product, the chunk-end states are then chained sequentially,
/// and finally each chunk adds the contribution of the state carried into it.
/// Channels are independent and processed in parallel.
pub fn selective_scan_chunked<T: Scalar>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
    chunk: usize,
) -> Result<Tensor<T>> {
    let dims = ScanDims::infer(u, delta, a_log, b, c, d_skip)?;
    check_delta(delta.data(), dims.channels)?;
    let ScanDims {
        batch,
        len,
        channels: nd,
        state: ns,
    } = dims;
    let chunk = chunk.clamp(1, len.max(1));
    let a: Vec<T> = a_log.data().iter().map(|&v| -v.exp()).collect();
    let mut y = vec![T::zero(); u.numel()];
    for bi in 0..batch {
        let u = &u.data()[bi * len * nd..(bi + 1) * len * nd];
        let dt = &delta.data()[bi * len * nd..(bi + 1) * len * nd];
        let bm = &b.data()[bi * len * ns..(bi + 1) * len * ns];
        let cm = &c.data()[bi * len * ns..(bi + 1) * len * ns];
        let cols: Vec<Vec<T>> = (0..nd)
            .into_par_iter()
            .map_init(
                || ChannelScratch::new(len, ns, chunk),
                |scratch, d| {
                    let uc: Vec<T> = (0..len).map(|l| u[l * nd + d]).collect();
                    let dc: Vec<T> = (0..len).map(|l| dt[l * nd + d]).collect();
                    let mut out = vec![T::zero(); len];
                    let chan = Channel {
                        u: &uc,
                        delta: &dc,
                        a: &a[d * ns..(d + 1) * ns],
                        b: bm,
                        c: cm,
                        skip: d_skip.data()[d],
                    };
                    chan.scan_chunked(chunk, scratch, &mut out);
                    out
                },
            )
            .collect();
        let y = &mut y[bi * len * nd..(bi + 1) * len * nd];
        for (d, col) in cols.iter().enumerate() {
            for (l, &v) in col.iter().enumerate() {
                y[l * nd + d] = v;
            }
        }
    }
    Ok(Tensor::new(u.shape().to_vec(), y)?)
}

struct ChannelScratch<T> {
    /// `C[l] * (decay product since chunk start)`, needed for the carry correction.
    weights: Vec<T>,
    ends: Vec<T>,
    decays: Vec<T>,
}

impl<T: Scalar> ChannelScratch<T> {
    fn new(len: usize, ns: usize, chunk: usize) -> Self {
        let chunks = len.div_ceil(chunk.max(1));
        Self {
            weights: vec![T::zero(); len * ns],
            ends: vec![T::zero(); chunks * ns],
            decays: vec![T::zero(); chunks * ns],
        }
    }
}

/// One channel of one sequence.
struct Channel<'a, T> {
    u: &'a [T],
    delta: &'a [T],
    a: &'a [T],
    b: &'a [T],
    c: &'a [T],
    skip: T,
}

impl<T: Scalar> Channel<'_, T> {
    fn scan_chunked(&self, chunk: usize, scratch: &mut ChannelScratch<T>, y: &mut [T]) {
        let len = self.u.len();
        let ns = self.a.len();
        let mut h = vec![T::zero(); ns];
        let mut prod = vec![T::one(); ns];
        // local scans
        for (k, start) in (0..len).step_by(chunk).enumerate() {
            let end = (start + chunk).min(len);
            h.fill(T::zero());
            prod.fill(T::one());
            for l in start..end {
                let (step, x) = (self.delta[l], self.u[l]);
                let (bl, cl) = (&self.b[l * ns..(l + 1) * ns], &self.c[l * ns..(l + 1) * ns]);
                let wl = &mut scratch.weights[l * ns..(l + 1) * ns];
                let mut acc = T::zero();
                for s in 0..ns {
                    let abar = (step * self.a[s]).exp();
                    h[s] = abar * h[s] + step * bl[s] * x;
                    acc += cl[s] * h[s];
                    if k > 0 {
                        prod[s] *= abar;
                        wl[s] = cl[s] * prod[s];
                    }
                }
                y[l] = acc + self.skip * x;
            }
            scratch.ends[k * ns..(k + 1) * ns].copy_from_slice(&h);
            scratch.decays[k * ns..(k + 1) * ns].copy_from_slice(&prod);
        }
        // carry: state entering chunk k, and corrections
        let mut carry = vec![T::zero(); ns];
        for (k, start) in (0..len).step_by(chunk).enumerate() {
            let end = (start + chunk).min(len);
            if k > 0 {
                for l in start..end {
                    let wl = &scratch.weights[l * ns..(l + 1) * ns];
                    let corr: T = wl.iter().zip(&carry).map(|(&w, &h)| w * h).sum();
                    y[l] += corr;
                }
                let decay = &scratch.decays[k * ns..(k + 1) * ns];
                for s in 0..ns {
                    carry[s] = decay[s] * carry[s] + scratch.ends[k * ns + s];
                }
            } else {
                carry.copy_from_slice(&scratch.ends[..ns]);
            }
        }
    }

    /// States just before each chunk start (`checkpoints[k]` precedes chunk `k`).
    fn checkpoints(&self, chunk: usize) -> Vec<Vec<T>> {
        let ns = self.a.len();
        let mut h = vec![T::zero(); ns];
        let mut out = Vec::new();
        for l in 0..self.u.len() {
            if l % chunk == 0 {
                out.push(h.clone());
            }
            self.step(l, &mut h);
        }
        out
    }

    fn step(&self, l: usize, h: &mut [T]) {
        let ns = h.len();
        let (step, x) = (self.delta[l], self.u[l]);
        for s in 0..ns {
            let abar = (step * self.a[s]).exp();
            h[s] = abar * h[s] + step * self.b[l * ns + s] * x;
        }
    }

    /// Reverse sweep with per-chunk state recomputation.
    fn backward(&self, dy: &[T], chunk: usize, acc: &mut ChannelGrads<T>) {
        let len = self.u.len();
        let ns = self.a.len();
        let checkpoints = self.checkpoints(chunk);
        let mut g_h = vec![T::zero(); ns];
        let mut d_a = vec![T::zero(); ns];
        let mut states = vec![T::zero(); (chunk + 1) * ns];
        for (k, start) in (0..len).step_by(chunk).enumerate().rev() {
            let end = (start + chunk).min(len);
            states[..ns].copy_from_slice(&checkpoints[k]);
            for l in start..end {
                let i = l - start;
                let (prev, next) = states.split_at_mut((i + 1) * ns);
                next[..ns].copy_from_slice(&prev[i * ns..]);
                self.step(l, &mut next[..ns]);
            }
            for l in (start..end).rev() {
                let i = l - start;
                let (step, x, gy) = (self.delta[l], self.u[l], dy[l]);
                let prev = &states[i * ns..(i + 1) * ns];
                let cur = &states[(i + 1) * ns..(i + 2) * ns];
                acc.d_skip += gy * x;
                let mut du = self.skip * gy;
                let mut ddelta = T::zero();
                for s in 0..ns {
                    let (bs, cs, a) = (self.b[l * ns + s], self.c[l * ns + s], self.a[s]);
                    acc.c[l * ns + s] += gy * cur[s];
                    let g = g_h[s] + gy * cs;
                    let abar = (step * a).exp();
                    ddelta += g * (a * abar * prev[s] + bs * x);
                    d_a[s] += g * step * abar * prev[s];
                    acc.b[l * ns + s] += g * step * x;
                    du += g * step * bs;
                    g_h[s] = g * abar;
                }
                acc.u[l] = du;
                acc.delta[l] = ddelta;
            }
        }
        // dA/da_log = A
        for s in 0..ns {
            acc.a_log[s] = d_a[s] * self.a[s];
        }
    }
}

struct ChannelGrads<T> {
    u: Vec<T>,
    delta: Vec<T>,
    a_log: Vec<T>,
    d_skip: T,
    /// Shared across channels; summed on reduction.
    b: Vec<T>,
    c: Vec<T>,
}

/// Gradients of a scan with respect to all six inputs.
#[derive(Clone, Debug)]
pub struct ScanGrads<T: Scalar> {
    pub u: Tensor<T>,
    pub delta: Tensor<T>,
    pub a_log: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub d_skip: Tensor<T>,
}

/// Adjoint of the scan given `dy = dL/dy`. States are recomputed from
/// checkpoints stored every `chunk` steps rather than kept from the forward pass.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_backward<T: Scalar>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
    dy: &Tensor<T>,
    chunk: usize,
) -> Result<ScanGrads<T>> {
    let dims = ScanDims::infer(u, delta, a_log, b, c, d_skip)?;
    if dy.shape() != u.shape() {
        return Err(Error::ScanShape(format!("dy {:?} vs u {:?}", dy.shape(), u.shape())));
    }
    let ScanDims {
        batch,
        len,
        channels: nd,
        state: ns,
    } = dims;
    let chunk = chunk.clamp(1, len.max(1));
    let a: Vec<T> = a_log.data().iter().map(|&v| -v.exp()).collect();
    let mut gu = vec![T::zero(); u.numel()];
    let mut gdelta = vec![T::zero(); u.numel()];
    let mut ga = vec![T::zero(); nd * ns];
    let mut gskip = vec![T::zero(); nd];
    let mut gb = vec![T::zero(); b.numel()];
    let mut gc = vec![T::zero(); c.numel()];
    for bi in 0..batch {
        let seq = bi * len * nd..(bi + 1) * len * nd;
        let st = bi * len * ns..(bi + 1) * len * ns;
        let (u, dt, dyb) = (&u.data()[seq.clone()], &delta.data()[seq.clone()], &dy.data()[seq.clone()]);
        let (bm, cm) = (&b.data()[st.clone()], &c.data()[st.clone()]);
        let per_channel = |d: usize, shared_b: &mut Vec<T>, shared_c: &mut Vec<T>| {
            let col = |m: &[T]| -> Vec<T> { (0..len).map(|l| m[l * nd + d]).collect() };
            let (uc, dc, gy) = (col(u), col(dt), col(dyb));
            let chan = Channel {
                u: &uc,
                delta: &dc,
                a: &a[d * ns..(d + 1) * ns],
                b: bm,
                c: cm,
                skip: d_skip.data()[d],
            };
            let mut acc = ChannelGrads {
                u: vec![T::zero(); len],
                delta: vec![T::zero(); len],
                a_log: vec![T::zero(); ns],
                d_skip: T::zero(),
                b: std::mem::take(shared_b),
                c: std::mem::take(shared_c),
            };
            chan.backward(&gy, chunk, &mut acc);
            *shared_b = std::mem::take(&mut acc.b);
            *shared_c = std::mem::take(&mut acc.c);
            (d, acc)
        };
        let (cols, sb, sc) = (0..nd)
            .into_par_iter()
            .fold(
                || (Vec::new(), vec![T::zero(); len * ns], vec![T::zero(); len * ns]),
                |(mut cols, mut sb, mut sc), d| {
                    cols.push(per_channel(d, &mut sb, &mut sc));
                    (cols, sb, sc)
                },
            )
            .reduce(
                || (Vec::new(), vec![T::zero(); len * ns], vec![T::zero(); len * ns]),
                |(mut c1, mut b1, mut s1), (c2, b2, s2)| {
                    c1.extend(c2);
                    b1.iter_mut().zip(&b2).for_each(|(x, &y)| *x += y);
                    s1.iter_mut().zip(&s2).for_each(|(x, &y)| *x += y);
                    (c1, b1, s1)
                },
            );
        for (d, g) in cols {
            for l in 0..len {
                gu[bi * len * nd + l * nd + d] = g.u[l];
                gdelta[bi * len * nd + l * nd + d] = g.delta[l];
            }
            for s in 0..ns {
                ga[d * ns + s] += g.a_log[s];
            }
            gskip[d] += g.d_skip;
        }
        gb[st.clone()].copy_from_slice(&sb);
        gc[st].copy_from_slice(&sc);
    }
    Ok(ScanGrads {
        u: Tensor::new(u.shape().to_vec(), gu)?,
        delta: Tensor::new(u.shape().to_vec(), gdelta)?,
        a_log: Tensor::new(a_log.shape().to_vec(), ga)?,
        b: Tensor::new(b.shape().to_vec(), gb)?,
        c: Tensor::new(c.shape().to_vec(), gc)?,
        d_skip: Tensor::new(d_skip.shape().to_vec(), gskip)?,
    })
}

struct ScanOp {
    chunk: usize,
}

impl<T: Scalar> CustomOp<T> for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> vadet_tensor::Result<Vec<Option<Tensor<T>>>> {
        let g = selective_scan_backward(
            inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5], grad, self.chunk,
        )
        .map_err(|e| vadet_tensor::TensorError::InvalidAttr {
            op: "selective_scan",
            detail: e.to_string(),
        })?;
        Ok(vec![
            Some(g.u),
            Some(g.delta),
            Some(g.a_log),
            Some(g.b),
            Some(g.c),
            Some(g.d_skip),
        ])
    }
}

/// Differentiable scan on the tape (chunked forward, recomputing backward).
#[allow(clippy::too_many_arguments)]
pub fn scan<T: Scalar>(
    tape: &Tape<T>,
    u: Var,
    delta: Var,
    a_log: Var,
    b: Var,
    c: Var,
    d_skip: Var,
    chunk: usize,
) -> Result<Var> {
    let y = selective_scan_chunked(
        &tape.value(u),
        &tape.value(delta),
        &tape.value(a_log),
        &tape.value(b),
        &tape.value(c),
        &tape.value(d_skip),
        chunk,
    )?;
    Ok(tape.custom(&[u, delta, a_log, b, c, d_skip], y, Box::new(ScanOp { chunk })))
}

// ------------------------------------------------------------------ 2-D scan

/// Traversal order of an `H×W` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowForward,
        Direction::RowBackward,
        Direction::ColForward,
        Direction::ColBackward,
    ];

    /// Grid cell `(row, col)` visited at sequence position `k`.
    pub fn cell(self, k: usize, height: usize, width: usize) -> (usize, usize) {
        let len = height * width;
        match self {
            Direction::RowForward => (k / width, k % width),
            Direction::RowBackward => Direction::RowForward.cell(len - 1 - k, height, width),
            Direction::ColForward => (k % height, k / height),
            Direction::ColBackward => Direction::ColForward.cell(len - 1 - k, height, width),
        }
    }

    fn reversed(self) -> bool {
        matches!(self, Direction::RowBackward | Direction::ColBackward)
    }

    fn column_major(self) -> bool {
        matches!(self, Direction::ColForward | Direction::ColBackward)
    }
}

/// `[N, H, W, D]` → `[N, H·W, D]` in the given traversal order.
pub fn flatten<T: Scalar>(x: &Tensor<T>, dir: Direction) -> Result<Tensor<T>> {
    let (n, h, w, d) = nhwc(x.shape())?;
    let mut out = Vec::with_capacity(x.numel());
    for b in 0..n {
        for k in 0..h * w {
            let (i, j) = dir.cell(k, h, w);
            let at = ((b * h + i) * w + j) * d;
            out.extend_from_slice(&x.data()[at..at + d]);
        }
    }
    Ok(Tensor::new(vec![n, h * w, d], out)?)
}

/// Inverse of [`flatten`].
pub fn unflatten<T: Scalar>(seq: &Tensor<T>, dir: Direction, height: usize, width: usize) -> Result<Tensor<T>> {
    if seq.rank() != 3 || seq.shape()[1] != height * width {
        return Err(Error::ScanShape(format!(
            "sequence {:?} does not cover a {height}×{width} grid",
            seq.shape()
        )));
    }
    let (n, d) = (seq.shape()[0], seq.shape()[2]);
    let mut out = vec![T::zero(); seq.numel()];
    for b in 0..n {
        for k in 0..height * width {
            let (i, j) = dir.cell(k, height, width);
            let src = (b * height * width + k) * d;
            let dst = ((b * height + i) * width + j) * d;
            out[dst..dst + d].copy_from_slice(&seq.data()[src..src + d]);
        }
    }
    Ok(Tensor::new(vec![n, height, width, d], out)?)
}

fn nhwc(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, h, w, d] => Ok((n, h, w, d)),
        _ => Err(Error::ScanShape(format!("expected [N, H, W, D], got {shape:?}"))),
    }
}

fn flatten_var<T: Scalar>(tape: &Tape<T>, x: Var, dir: Direction) -> Result<Var> {
    let (n, h, w, d) = nhwc(&tape.shape(x))?;
    let grid = if dir.column_major() {
        tape.permute(x, &[0, 2, 1, 3])?
    } else {
        x
    };
    let seq = tape.reshape(grid, &[n, h * w, d])?;
    Ok(if dir.reversed() { tape.reverse(seq, 1)? } else { seq })
}

fn unflatten_var<T: Scalar>(tape: &Tape<T>, seq: Var, dir: Direction, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(seq);
    let (n, d) = (s[0], s[2]);
    let seq = if dir.reversed() { tape.reverse(seq, 1)? } else { seq };
    Ok(if dir.column_major() {
        let g = tape.reshape(seq, &[n, w, h, d])?;
        tape.permute(g, &[0, 2, 1, 3])?
    } else {
        tape.reshape(seq, &[n, h, w, d])?
    })
}

/// Hyperparameters of one directional scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanConfig {
    pub state: usize,
    /// Rank of the step-size projection; `None` means `ceil(channels / 16)`.
    pub dt_rank: Option<usize>,
    pub dt_min: f64,
    pub dt_max: f64,
    pub chunk: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            state: DEFAULT_STATE,
            dt_rank: None,
            dt_min: 1e-3,
            dt_max: 0.1,
            chunk: DEFAULT_CHUNK,
        }
    }
}

/// Parameters of a single directional scan over `channels` features.
#[derive(Clone, Debug)]
pub struct ScanParams {
    /// `[D, R + 2S]`: low-rank step input, then B, then C.
    pub x_proj: ParamId,
    /// `[R, D]` and `[D]`: step-size projection.
    pub dt_weight: ParamId,
    pub dt_bias: ParamId,
    /// `[D, S]`, `A = -exp(a_log)`.
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub channels: usize,
    pub state: usize,
    pub dt_rank: usize,
}

impl ScanParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        cfg: &ScanConfig,
        rng: &mut R,
    ) -> Self {
        let state = cfg.state;
        let dt_rank = cfg.dt_rank.unwrap_or(channels.div_ceil(16)).max(1);
        let x_proj = store.add(
            format!("{prefix}.x_proj"),
            trunc_normal(&[channels, dt_rank + 2 * state], 0.02, rng),
        );
        let bound = (dt_rank as f64).powf(-0.5);
        let dt_weight = store.add(
            format!("{prefix}.dt_proj.weight"),
            Tensor::uniform(&[dt_rank, channels], -bound, bound, rng),
        );
        // bias = softplus⁻¹(dt) with dt log-uniform in [dt_min, dt_max]
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let bias = Tensor::from_fn(&[channels], |_| {
            let dt = (lo + (hi - lo) * rng.random::<f64>()).exp().max(1e-4);
            T::lit(dt + (-(-dt).exp_m1()).ln())
        });
        let dt_bias = store.add(format!("{prefix}.dt_proj.bias"), bias);
        let a_log = store.add(
            format!("{prefix}.a_log"),
            Tensor::from_fn(&[channels, state], |i| T::lit(((i % state) + 1) as f64).ln()),
        );
        let d_skip = store.add(format!("{prefix}.d_skip"), Tensor::ones(&[channels]));
        Self {
            x_proj,
            dt_weight,
            dt_bias,
            a_log,
            d_skip,
            channels,
            state,
            dt_rank,
        }
    }

    /// Project a `[N, L, D]` sequence to its step sizes, B and C, then scan it.
    pub fn apply<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, seq: Var, chunk: usize) -> Result<Var> {
        let (r, s) = (self.dt_rank, self.state);
        let proj = tape.linear(seq, tape.param(store, self.x_proj), None)?;
        let axis = tape.shape(proj).len() - 1;
        let low = tape.slice(proj, axis, 0, r)?;
        let b = tape.slice(proj, axis, r, r + s)?;
        let c = tape.slice(proj, axis, r + s, r + 2 * s)?;
        let pre = tape.linear(
            low,
            tape.param(store, self.dt_weight),
            Some(tape.param(store, self.dt_bias)),
        )?;
        // softplus underflows to exactly zero in f32 for very negative inputs
        let delta = tape.add_scalar(tape.softplus(pre), DELTA_FLOOR);
        scan(
            tape,
            seq,
            delta,
            tape.param(store, self.a_log),
            b,
            c,
            tape.param(store, self.d_skip),
            chunk,
        )
    }
}

/// Four-direction scan of an `[N, H, W, D]` map; directional results are summed.
pub fn ss2d<T: Scalar>(
    tape: &Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    params: &[ScanParams; 4],
    chunk: usize,
) -> Result<Var> {
    let (_, h, w, d) = nhwc(&tape.shape(x))?;
    let mut total: Option<Var> = None;
    for (dir, p) in Direction::ALL.into_iter().zip(params) {
        if p.channels != d {
            return Err(Error::ScanShape(format!(
                "scan parameters for {} channels applied to {d}",
                p.channels
            )));
        }
        let seq = flatten_var(tape, x, dir)?;
        let y = p.apply(tape, store, seq, chunk)?;
        let grid = unflatten_var(tape, y, dir, h, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, grid)?,
            None => grid,
        });
    }
    Ok(total.expect("four directions"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direction_cells_cover_grid() {
        for dir in Direction::ALL {
            let mut seen = [[false; 3]; 2];
            for k in 0..6 {
                let (i, j) = dir.cell(k, 2, 3);
                assert!(!seen[i][j]);
                seen[i][j] = true;
            }
        }
        assert_eq!(Direction::ColForward.cell(1, 2, 3), (1, 0));
        assert_eq!(Direction::RowBackward.cell(0, 2, 3), (1, 2));
    }

    #[test]
    fn nonpositive_delta_is_rejected() {
        let u = Tensor::<f64>::ones(&[3, 2]);
        let mut delta = Tensor::full(&[3, 2], 0.1);
        delta.data_mut()[3] = 0.0;
        let a = Tensor::zeros(&[2, 4]);
        let b = Tensor::ones(&[3, 4]);
        let d = Tensor::ones(&[2]);
        let err = selective_scan_naive(&u, &delta, &a, &b, &b, &d).unwrap_err();
        assert!(matches!(err, Error::NonpositiveDelta { step: 1, channel: 1, .. }));
        assert!(selective_scan_fast(&u, &delta, &a, &b, &b, &d).is_err());
        let short = Tensor::ones(&[2, 4]);
        assert!(matches!(
            selective_scan_naive(&u, &Tensor::full(&[3, 2], 0.1), &a, &short, &b, &d),
            Err(Error::ScanShape(_))
        ));
    }
}
