//! Reverse-mode gradient tape.
//!
//! Every primitive pushes one node holding its forward value and whatever it
//! needs for the adjoint. Nodes are appended in execution order, so the node
//! list is already topologically sorted and `backward` is a single reverse sweep.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{attr_err, shape_err, Result, TensorError};
use crate::kernels::{self, Broadcast, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// An operation with a hand-written adjoint, recorded as a single node.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the output gradient (`None` = no contribution).
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Silu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Abs(usize),
    MatMul {
        a: usize,
        b: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        batch: usize,
        out_channels: usize,
    },
    Depthwise {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        batch: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
        train: bool,
    },
    Sum(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    Max {
        x: usize,
        argmax: usize,
    },
    MaxAxis {
        x: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reverse {
        x: usize,
        axis: usize,
    },
    Pad {
        x: usize,
        pads: Vec<(usize, usize)>,
    },
    GatherRows {
        table: usize,
        indices: Vec<usize>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by one backward sweep, kept for leaf nodes only.
pub struct Grads<T: Scalar> {
    tape: u64,
    leaves: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the loss w.r.t. a leaf (input or parameter) variable.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.leaves.get(var.index).and_then(Option::as_ref)
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, i)| self.leaves[i].as_ref().map(|g| (id, g)))
    }
}

pub struct Tape<T: Scalar> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[usize], param: Option<ParamId>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let index = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    /// A differentiable input (gradient is reported by [`Grads::wrt`]).
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, None)
    }

    /// A constant input; never accumulates gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Bring a stored parameter onto the tape. Frozen parameters enter as constants.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push_leaf(p.value.clone(), p.trainable, Some(id))
    }

    /// Stop-gradient: same forward value, no path back to `x`.
    pub fn detach(&self, x: Var) -> Var {
        let v = self.value(x);
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.check(v);
        self.nodes.borrow()[v.index].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.check(v);
        self.nodes.borrow()[v.index].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v);
        self.nodes.borrow()[v.index].requires_grad
    }

    fn check(&self, v: Var) {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
    }

    fn val(&self, v: Var) -> Tensor<T> {
        self.value(v)
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.val(a), self.val(b));
        let out_shape = kernels::broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
            shape_err(name, format!("{:?} vs {:?}", va.shape(), vb.shape()))
        })?;
        let n = kernels::numel(&out_shape);
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let pa = Broadcast::plan(va.shape(), &out_shape);
            let pb = Broadcast::plan(vb.shape(), &out_shape);
            let (da, db) = (va.data(), vb.data());
            (0..n).map(|i| f(da[pa.index(i)], db[pb.index(i)])).collect()
        };
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, op(a.index, b.index), &[a.index, b.index], None))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.val(x).map(f);
        self.push(out, op, &[x.index], None)
    }

    /// Multiply by a constant.
    pub fn scale(&self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, |v| v * c, Op::Scale(x.index, c))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, |v| v + c, Op::AddScalar(x.index))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x.index))
    }

    pub fn silu(&self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x.index))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.index))
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x.index))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp(x.index))
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, T::ln, Op::Log(x.index))
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, T::sqrt, Op::Sqrt(x.index))
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, T::abs, Op::Abs(x.index))
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    // ---------------------------------------------------------------- linear algebra

    /// `[m,k]·[k,n]`, `[b,m,k]·[k,n]` or `[b,m,k]·[b,k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.val(a), self.val(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let bad = || shape_err("matmul", format!("{sa:?} · {sb:?}"));
        let (batch, m, k, n, shared_rhs) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[1], true),
            (3, 2) => (sa[0], sa[1], sa[2], sb[1], true),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[2], false),
            _ => return Err(bad()),
        };
        if sb[sb.len() - 2] != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        if shared_rhs {
            gemm(batch * m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        } else {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &vb.data()[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MatMul { a: a.index, b: b.index }, &[a.index, b.index], None))
    }

    /// `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.val(x), self.val(w));
        let sx = vx.shape();
        let sw = vw.shape();
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[0] {
            return Err(shape_err("linear", format!("x {sx:?}, w {sw:?}")));
        }
        let (fan_in, fan_out) = (sw[0], sw[1]);
        let rows = vx.numel() / fan_in;
        let mut out = vec![T::zero(); rows * fan_out];
        gemm(rows, fan_in, fan_out, vx.data(), false, vw.data(), false, &mut out, false);
        let mut parents = vec![x.index, w.index];
        if let Some(b) = b {
            let vb = self.val(b);
            if vb.shape() != [fan_out] {
                return Err(shape_err("linear", format!("bias {:?}", vb.shape())));
            }
            for row in out.chunks_mut(fan_out) {
                for (o, &bv) in row.iter_mut().zip(vb.data()) {
                    *o += bv;
                }
            }
            parents.push(b.index);
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let out = Tensor::new(shape, out)?;
        let op = Op::Linear {
            x: x.index,
            w: w.index,
            b: b.map(|b| b.index),
        };
        Ok(self.push(out, op, &parents, None))
    }

    /// NCHW convolution with `w: O×C×kh×kw`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.val(x), self.val(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", format!("x {sx:?}, w {sw:?}")));
        }
        if stride == 0 {
            return Err(attr_err("conv2d", "stride must be ≥ 1"));
        }
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(attr_err("conv2d", "kernel larger than padded input"));
        }
        let bias = b.map(|b| self.val(b));
        if let Some(bv) = &bias {
            if bv.shape() != [sw[0]] {
                return Err(shape_err("conv2d", format!("bias {:?}", bv.shape())));
            }
        }
        let out = kernels::conv2d_forward(
            vx.data(),
            vw.data(),
            bias.as_ref().map(|t| t.data()),
            sx[0],
            sw[0],
            &geom,
        );
        let out = Tensor::new(vec![sx[0], sw[0], geom.out_h(), geom.out_w()], out)?;
        let mut parents = vec![x.index, w.index];
        parents.extend(b.map(|b| b.index));
        let op = Op::Conv2d {
            x: x.index,
            w: w.index,
            b: b.map(|b| b.index),
            geom,
            batch: sx[0],
            out_channels: sw[0],
        };
        Ok(self.push(out, op, &parents, None))
    }

    /// NCHW depthwise convolution with `w: C×1×kh×kw`.
    pub fn depthwise_conv2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.val(x), self.val(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[1] != 1 {
            return Err(shape_err("depthwise_conv2d", format!("x {sx:?}, w {sw:?}")));
        }
        if stride == 0 {
            return Err(attr_err("depthwise_conv2d", "stride must be ≥ 1"));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(attr_err("depthwise_conv2d", "kernel larger than padded input"));
        }
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let bias = b.map(|b| self.val(b));
        if let Some(bv) = &bias {
            if bv.shape() != [sx[1]] {
                return Err(shape_err("depthwise_conv2d", format!("bias {:?}", bv.shape())));
            }
        }
        let out = kernels::depthwise_forward(
            vx.data(),
            vw.data(),
            bias.as_ref().map(|t| t.data()),
            sx[0],
            &geom,
        );
        let out = Tensor::new(vec![sx[0], sx[1], geom.out_h(), geom.out_w()], out)?;
        let mut parents = vec![x.index, w.index];
        parents.extend(b.map(|b| b.index));
        let op = Op::Depthwise {
            x: x.index,
            w: w.index,
            b: b.map(|b| b.index),
            geom,
            batch: sx[0],
        };
        Ok(self.push(out, op, &parents, None))
    }

    // ---------------------------------------------------------------- normalization

    /// Normalize over the trailing axis, then apply `gamma`/`beta` of that extent.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.val(x), self.val(gamma), self.val(beta));
        let width = *vx
            .shape()
            .last()
            .ok_or_else(|| shape_err("layer_norm", "rank-0 input"))?;
        if vg.shape() != [width] || vb.shape() != [width] {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        if eps < 0.0 {
            return Err(attr_err("layer_norm", "eps must be ≥ 0"));
        }
        let (xhat, rstd) = kernels::normalize_rows(vx.data(), width, T::lit(eps));
        let mut out = xhat.clone();
        for row in out.chunks_mut(width) {
            for ((o, &g), &b) in row.iter_mut().zip(vg.data()).zip(vb.data()) {
                *o = *o * g + b;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x: x.index,
            gamma: gamma.index,
            beta: beta.index,
            xhat,
            rstd,
        };
        Ok(self.push(out, op, &[x.index, gamma.index, beta.index], None))
    }

    /// NCHW batch norm. In training mode, normalizes with batch statistics and
    /// returns updated running statistics; in eval mode uses `stats` as-is.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BnStats<T>,
        train: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let (vx, vg, vb) = (self.val(x), self.val(gamma), self.val(beta));
        let s = vx.shape();
        if s.len() != 4 {
            return Err(shape_err("batch_norm", format!("expected NCHW, got {s:?}")));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        for t in [&vg, &vb, &stats.mean, &stats.var] {
            if t.shape() != [c] {
                return Err(shape_err("batch_norm", format!("per-channel tensor {:?}", t.shape())));
            }
        }
        if !(0.0..=1.0).contains(&momentum) || eps < 0.0 {
            return Err(attr_err("batch_norm", "momentum ∈ [0,1], eps ≥ 0"));
        }
        let count = n * plane;
        if train && count < 2 {
            return Err(attr_err("batch_norm", "training mode needs ≥ 2 values per channel"));
        }
        let xd = vx.data();
        let eps_t = T::lit(eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if train {
            let inv = T::one() / T::lit(count as f64);
            for ch in 0..c {
                let mut acc = T::zero();
                for b in 0..n {
                    acc += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum::<T>();
                }
                mean[ch] = acc * inv;
                let mut acc = T::zero();
                for b in 0..n {
                    for &v in &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        acc += (v - mean[ch]) * (v - mean[ch]);
                    }
                }
                var[ch] = acc * inv;
            }
        } else {
            mean.copy_from_slice(stats.mean.data());
            var.copy_from_slice(stats.var.data());
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                let (g, be) = (vg.data()[ch], vb.data()[ch]);
                for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xd[r]) {
                    *h = (v - mean[ch]) * rstd[ch];
                    *o = *h * g + be;
                }
            }
        }
        let updated = train.then(|| {
            let m = T::lit(momentum);
            let unbias = T::lit(count as f64 / (count - 1) as f64);
            BnStats {
                mean: Tensor::from_fn(&[c], |i| (T::one() - m) * stats.mean.data()[i] + m * mean[i]),
                var: Tensor::from_fn(&[c], |i| {
                    (T::one() - m) * stats.var.data()[i] + m * var[i] * unbias
                }),
            }
        });
        let out = Tensor::new(s.to_vec(), out)?;
        let op = Op::BatchNorm {
            x: x.index,
            gamma: gamma.index,
            beta: beta.index,
            xhat,
            rstd,
            train,
        };
        Ok((self.push(out, op, &[x.index, gamma.index, beta.index], None), updated))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&self, x: Var) -> Var {
        let s = self.val(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x.index), &[x.index], None)
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.val(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.val(x);
        if axis >= vx.rank() {
            return Err(attr_err("sum_axis", format!("axis {axis} for rank {}", vx.rank())));
        }
        let data = kernels::sum_axis(vx.data(), vx.shape(), axis);
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SumAxis { x: x.index, axis }, &[x.index], None))
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1).max(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Global maximum (first occurrence receives the gradient).
    pub fn max(&self, x: Var) -> Result<Var> {
        let vx = self.val(x);
        if vx.numel() == 0 {
            return Err(shape_err("max", "empty tensor"));
        }
        let (argmax, &m) = vx
            .data()
            .iter()
            .enumerate()
            .fold((0, &vx.data()[0]), |best, cur| if *cur.1 > *best.1 { cur } else { best });
        Ok(self.push(Tensor::scalar(m), Op::Max { x: x.index, argmax }, &[x.index], None))
    }

    /// Maximum along one axis, removing it.
    pub fn max_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.val(x);
        if axis >= vx.rank() || vx.shape()[axis] == 0 {
            return Err(attr_err("max_axis", format!("axis {axis} of {:?}", vx.shape())));
        }
        let (outer, len, inner) = kernels::around_axis(vx.shape(), axis);
        let d = vx.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for a in 1..len {
                    if d[(o * len + a) * inner + i] > d[(o * len + best) * inner + i] {
                        best = a;
                    }
                }
                argmax.push(best);
                out.push(d[(o * len + best) * inner + i]);
            }
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MaxAxis { x: x.index, axis, argmax }, &[x.index], None))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x.index), &[x.index], None))
    }

    /// General axis permutation (`transpose`).
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let vx = self.val(x);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..vx.rank()).collect::<Vec<_>>() {
            return Err(attr_err("permute", format!("{perm:?} for rank {}", vx.rank())));
        }
        let (data, shape) = kernels::permute(vx.data(), vx.shape(), perm);
        let out = Tensor::new(shape, data)?;
        let op = Op::Permute {
            x: x.index,
            perm: perm.to_vec(),
        };
        Ok(self.push(out, op, &[x.index], None))
    }

    /// Swap two axes.
    pub fn transpose(&self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if a >= rank || b >= rank {
            return Err(attr_err("transpose", format!("axes ({a},{b}) for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Tensor<T>> = xs.iter().map(|&v| self.val(v)).collect();
        let first = vals.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(attr_err("concat", format!("axis {axis} for rank {}", first.rank())));
        }
        let mut total = 0;
        for v in &vals {
            let ok = v.rank() == first.rank()
                && v.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{:?} vs {:?}", v.shape(), first.shape())));
            }
            total += v.shape()[axis];
        }
        let (outer, _, inner) = kernels::around_axis(first.shape(), axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let idx: Vec<usize> = xs.iter().map(|v| v.index).collect();
        Ok(self.push(out, Op::Concat { xs: idx.clone(), axis }, &idx, None))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let vx = self.val(x);
        if axis >= vx.rank() || start > end || end > vx.shape()[axis] {
            return Err(attr_err(
                "slice",
                format!("axis {axis} range {start}..{end} of {:?}", vx.shape()),
            ));
        }
        let (outer, len, inner) = kernels::around_axis(vx.shape(), axis);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&vx.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = end - start;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Slice { x: x.index, axis, start }, &[x.index], None))
    }

    pub fn reverse(&self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.val(x);
        if axis >= vx.rank() {
            return Err(attr_err("reverse", format!("axis {axis} for rank {}", vx.rank())));
        }
        let data = reverse_axis(vx.data(), vx.shape(), axis);
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Reverse { x: x.index, axis }, &[x.index], None))
    }

    /// Zero padding, `(before, after)` per axis.
    pub fn pad(&self, x: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let vx = self.val(x);
        if pads.len() != vx.rank() {
            return Err(attr_err("pad", format!("{} pad pairs for rank {}", pads.len(), vx.rank())));
        }
        let out_shape: Vec<usize> = vx
            .shape()
            .iter()
            .zip(pads)
            .map(|(&d, &(a, b))| d + a + b)
            .collect();
        let mut data = vec![T::zero(); kernels::numel(&out_shape)];
        for_each_padded(vx.shape(), pads, |src, dst| data[dst] = vx.data()[src]);
        let out = Tensor::new(out_shape, data)?;
        let op = Op::Pad {
            x: x.index,
            pads: pads.to_vec(),
        };
        Ok(self.push(out, op, &[x.index], None))
    }

    /// Row lookup: `table[K, d]` at `indices` → `[indices.len(), d]`.
    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Result<Var> {
        let vt = self.val(table);
        if vt.rank() != 2 {
            return Err(shape_err("gather_rows", format!("table {:?}", vt.shape())));
        }
        let (k, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= k {
                return Err(attr_err("gather_rows", format!("index {i} ≥ {k}")));
            }
            data.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        let op = Op::GatherRows {
            table: table.index,
            indices: indices.to_vec(),
        };
        Ok(self.push(out, op, &[table.index], None))
    }

    /// Record an externally computed value whose adjoint is supplied by `op`.
    pub fn custom(&self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let idx: Vec<usize> = inputs.iter().map(|v| v.index).collect();
        self.push(output, Op::Custom { inputs: idx.clone(), op }, &idx, None)
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if loss.tape != self.id {
            return Err(TensorError::DetachedTensor);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.index];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::DetachedTensor);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut params = Vec::new();
        for i in (0..=loss.index).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                if let Some(pid) = node.param {
                    params.push((pid, i));
                }
                leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop_node(&nodes, i, g, &mut grads)?;
        }
        Ok(Grads {
            tape: self.id,
            leaves,
            params,
        })
    }

    fn backprop_node(
        &self,
        nodes: &[Node<T>],
        i: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let node = &nodes[i];
        let out = &node.value;
        let needs = |p: usize| nodes[p].requires_grad;
        let value = |p: usize| &nodes[p].value;
        let mut send = |p: usize, contrib: Vec<T>| {
            if nodes[p].requires_grad {
                add_into(&mut grads[p], contrib);
            }
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let neg_b = matches!(node.op, Op::Sub(..));
                if needs(a) {
                    let plan = Broadcast::plan(value(a).shape(), out.shape());
                    send(a, plan.reduce(&g, value(a).numel()));
                }
                if needs(b) {
                    let plan = Broadcast::plan(value(b).shape(), out.shape());
                    let mut gb = plan.reduce(&g, value(b).numel());
                    if neg_b {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    send(b, gb);
                }
            }
            &Op::Mul(a, b) | &Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (va, vb) = (value(a), value(b));
                let pa = Broadcast::plan(va.shape(), out.shape());
                let pb = Broadcast::plan(vb.shape(), out.shape());
                let (da, db) = (va.data(), vb.data());
                if needs(a) {
                    let full: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(k, &gv)| {
                            let y = db[pb.index(k)];
                            if is_div {
                                gv / y
                            } else {
                                gv * y
                            }
                        })
                        .collect();
                    send(a, pa.reduce(&full, va.numel()));
                }
                if needs(b) {
                    let full: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(k, &gv)| {
                            let x = da[pa.index(k)];
                            if is_div {
                                let y = db[pb.index(k)];
                                -gv * x / (y * y)
                            } else {
                                gv * x
                            }
                        })
                        .collect();
                    send(b, pb.reduce(&full, vb.numel()));
                }
            }
            &Op::Scale(x, c) => send(x, g.iter().map(|&v| v * c).collect()),
            &Op::AddScalar(x) => send(x, g),
            &Op::Relu(x) => send(
                x,
                zip_map(&g, value(x).data(), |gv, v| if v > T::zero() { gv } else { T::zero() }),
            ),
            &Op::Silu(x) => send(
                x,
                zip_map(&g, value(x).data(), |gv, v| {
                    let s = sigmoid(v);
                    gv * s * (T::one() + v * (T::one() - s))
                }),
            ),
            &Op::Sigmoid(x) => send(x, zip_map(&g, out.data(), |gv, y| gv * y * (T::one() - y))),
            &Op::Softplus(x) => send(x, zip_map(&g, value(x).data(), |gv, v| gv * sigmoid(v))),
            &Op::Exp(x) => send(x, zip_map(&g, out.data(), |gv, y| gv * y)),
            &Op::Log(x) => send(x, zip_map(&g, value(x).data(), |gv, v| gv / v)),
            &Op::Sqrt(x) => send(
                x,
                zip_map(&g, out.data(), |gv, y| gv / (T::lit(2.0) * y)),
            ),
            &Op::Abs(x) => send(
                x,
                zip_map(&g, value(x).data(), |gv, v| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                }),
            ),
            &Op::MatMul { a, b } => {
                let (va, vb) = (value(a), value(b));
                let (sa, sb) = (va.shape(), vb.shape());
                let (batch, m, k) = if sa.len() == 2 { (1, sa[0], sa[1]) } else { (sa[0], sa[1], sa[2]) };
                let n = sb[sb.len() - 1];
                if sb.len() == 2 {
                    let rows = batch * m;
                    if needs(a) {
                        let mut ga = vec![T::zero(); rows * k];
                        gemm(rows, n, k, &g, false, vb.data(), true, &mut ga, false);
                        send(a, ga);
                    }
                    if needs(b) {
                        let mut gb = vec![T::zero(); k * n];
                        gemm(k, rows, n, va.data(), true, &g, false, &mut gb, false);
                        send(b, gb);
                    }
                } else {
                    if needs(a) {
                        let mut ga = vec![T::zero(); batch * m * k];
                        for t in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &vb.data()[t * k * n..(t + 1) * k * n],
                                true,
                                &mut ga[t * m * k..(t + 1) * m * k],
                                false,
                            );
                        }
                        send(a, ga);
                    }
                    if needs(b) {
                        let mut gb = vec![T::zero(); batch * k * n];
                        for t in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &va.data()[t * m * k..(t + 1) * m * k],
                                true,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &mut gb[t * k * n..(t + 1) * k * n],
                                false,
                            );
                        }
                        send(b, gb);
                    }
                }
            }
            &Op::Linear { x, w, b } => {
                let (vx, vw) = (value(x), value(w));
                let (fan_in, fan_out) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.numel() / fan_in;
                if needs(x) {
                    let mut gx = vec![T::zero(); rows * fan_in];
                    gemm(rows, fan_out, fan_in, &g, false, vw.data(), true, &mut gx, false);
                    send(x, gx);
                }
                if needs(w) {
                    let mut gw = vec![T::zero(); fan_in * fan_out];
                    gemm(fan_in, rows, fan_out, vx.data(), true, &g, false, &mut gw, false);
                    send(w, gw);
                }
                if let Some(b) = b {
                    if needs(b) {
                        let mut gb = vec![T::zero(); fan_out];
                        for row in g.chunks(fan_out) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        send(b, gb);
                    }
                }
            }
            &Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                out_channels,
            } => {
                let (gx, gw) = kernels::conv2d_backward(
                    value(x).data(),
                    value(w).data(),
                    &g,
                    batch,
                    out_channels,
                    &geom,
                    needs(x),
                    needs(w),
                );
                if let Some(gx) = gx {
                    send(x, gx);
                }
                if let Some(gw) = gw {
                    send(w, gw);
                }
                if let Some(b) = b {
                    if needs(b) {
                        send(b, channel_sums(&g, batch, out_channels));
                    }
                }
            }
            &Op::Depthwise { x, w, b, geom, batch } => {
                if needs(x) || needs(w) {
                    let (gx, gw) = kernels::depthwise_backward(value(x).data(), value(w).data(), &g, batch, &geom);
                    send(x, gx);
                    send(w, gw);
                }
                if let Some(b) = b {
                    if needs(b) {
                        send(b, channel_sums(&g, batch, geom.channels));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let width = value(*gamma).numel();
                let gd = value(*gamma).data();
                if needs(*x) {
                    let dxhat: Vec<T> = g
                        .chunks(width)
                        .flat_map(|row| row.iter().zip(gd).map(|(&a, &b)| a * b))
                        .collect();
                    send(*x, kernels::normalize_rows_backward(xhat, rstd, &dxhat, width));
                }
                if needs(*gamma) {
                    let mut gg = vec![T::zero(); width];
                    for (row, xr) in g.chunks(width).zip(xhat.chunks(width)) {
                        for ((o, &a), &b) in gg.iter_mut().zip(row).zip(xr) {
                            *o += a * b;
                        }
                    }
                    send(*gamma, gg);
                }
                if needs(*beta) {
                    let mut gb = vec![T::zero(); width];
                    for row in g.chunks(width) {
                        for (o, &a) in gb.iter_mut().zip(row) {
                            *o += a;
                        }
                    }
                    send(*beta, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            } => {
                let s = value(*x).shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gd = value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                        for (&gv, &h) in g[r.clone()].iter().zip(&xhat[r]) {
                            sum_g[ch] += gv;
                            sum_gx[ch] += gv * h;
                        }
                    }
                }
                if needs(*x) {
                    let inv = T::one() / T::lit((n * plane) as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                            let k = gd[ch] * rstd[ch];
                            for ((o, &gv), &h) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                *o = if *train {
                                    k * (gv - sum_g[ch] * inv - h * sum_gx[ch] * inv)
                                } else {
                                    k * gv
                                };
                            }
                        }
                    }
                    send(*x, gx);
                }
                send(*gamma, sum_gx);
                send(*beta, sum_g);
            }
            &Op::Sum(x) => send(x, vec![g[0]; value(x).numel()]),
            &Op::SumAxis { x, axis } => {
                let (outer, len, inner) = kernels::around_axis(value(x).shape(), axis);
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                send(x, gx);
            }
            &Op::Max { x, argmax } => {
                let mut gx = vec![T::zero(); value(x).numel()];
                gx[argmax] = g[0];
                send(x, gx);
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, len, inner) = kernels::around_axis(value(*x).shape(), *axis);
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let a = argmax[o * inner + i];
                        gx[(o * len + a) * inner + i] = g[o * inner + i];
                    }
                }
                send(*x, gx);
            }
            &Op::Reshape(x) => send(x, g),
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_perm(perm);
                let (gx, _) = kernels::permute(&g, out.shape(), &inv);
                send(*x, gx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = kernels::around_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in xs {
                    let len = value(p).shape()[*axis];
                    if needs(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        send(p, gp);
                    }
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, len, inner) = kernels::around_axis(value(x).shape(), axis);
                let taken = out.shape()[axis];
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    gx[dst..dst + taken * inner].copy_from_slice(&g[o * taken * inner..(o + 1) * taken * inner]);
                }
                send(x, gx);
            }
            &Op::Reverse { x, axis } => send(x, reverse_axis(&g, out.shape(), axis)),
            Op::Pad { x, pads } => {
                let mut gx = vec![T::zero(); value(*x).numel()];
                for_each_padded(value(*x).shape(), pads, |src, dst| gx[src] = g[dst]);
                send(*x, gx);
            }
            Op::GatherRows { table, indices } => {
                let vt = value(*table);
                let d = vt.shape()[1];
                let mut gt = vec![T::zero(); vt.numel()];
                for (r, &idx) in indices.iter().enumerate() {
                    for (o, &v) in gt[idx * d..(idx + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                send(*table, gt);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&p| value(p)).collect();
                let gt = Tensor::new(out.shape().to_vec(), g)?;
                let contribs = op.backward(&vals, out, &gt)?;
                if contribs.len() != inputs.len() {
                    return Err(shape_err(op.name(), "adjoint returned wrong number of gradients"));
                }
                for (&p, c) in inputs.iter().zip(contribs) {
                    if let Some(c) = c {
                        if c.shape() != value(p).shape() {
                            return Err(shape_err(op.name(), "adjoint gradient shape"));
                        }
                        send(p, c.into_vec());
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn zip_map<T: Scalar>(g: &[T], v: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    g.iter().zip(v).map(|(&a, &b)| f(a, b)).collect()
}

fn channel_sums<T: Scalar>(g: &[T], batch: usize, channels: usize) -> Vec<T> {
    let plane = g.len() / (batch * channels);
    let mut out = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            *o += g[(b * channels + c) * plane..(b * channels + c + 1) * plane].iter().copied().sum::<T>();
        }
    }
    out
}

fn reverse_axis<T: Scalar>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = kernels::around_axis(shape, axis);
    let mut out = Vec::with_capacity(data.len());
    for o in 0..outer {
        for a in (0..len).rev() {
            out.extend_from_slice(&data[(o * len + a) * inner..(o * len + a + 1) * inner]);
        }
    }
    out
}

/// Visit (source offset, padded offset) for every element of an unpadded tensor.
fn for_each_padded(shape: &[usize], pads: &[(usize, usize)], mut f: impl FnMut(usize, usize)) {
    let n = kernels::numel(shape);
    if n == 0 {
        return;
    }
    let out_shape: Vec<usize> = shape.iter().zip(pads).map(|(&d, &(a, b))| d + a + b).collect();
    let out_strides = kernels::strides(&out_shape);
    let mut idx = vec![0usize; shape.len()];
    for src in 0..n {
        let dst: usize = idx
            .iter()
            .zip(pads)
            .zip(&out_strides)
            .map(|((&i, &(before, _)), &s)| (i + before) * s)
            .sum();
        f(src, dst);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}
