//! Parameterized layers over the tape.

use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use vadet_tensor::{BnStats, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use crate::error::Result;

/// Normal samples with std `std`, redrawn outside two standard deviations.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::lit(z * std);
        }
    })
}

/// He-normal initialization for convolutions.
pub fn kaiming<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Everything a forward pass needs besides its input.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    pub store: &'a ParamStore<T>,
    pub train: bool,
    pub chunk: usize,
    updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>, train: bool) -> Self {
        Self {
            tape,
            store,
            train,
            chunk: crate::ssm::DEFAULT_CHUNK,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    /// Buffer updates (batch-norm running statistics) produced in training mode.
    pub fn take_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}

/// Write buffer updates collected by [`Ctx::take_updates`] back into the store.
pub fn apply_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(ParamId, Tensor<T>)>) {
    for (id, value) in updates {
        store.set_value(id, value);
    }
}

/// `y = x W + b` with `W: [in, out]`, over the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::with_std(store, name, fan_in, fan_out, bias, 0.02, rng)
    }

    /// As [`Linear::new`] with weights of standard deviation `std`.
    pub fn with_std<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal(&[fan_in, fan_out], std, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let b = self.bias.map(|id| cx.param(id));
        Ok(cx.tape.linear(x, cx.param(self.weight), b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[width])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Result<Var> {
        Ok(cx
            .tape
            .layer_norm(x, cx.param(self.gamma), cx.param(self.beta), Self::EPS)?)
    }
}

/// Dense NCHW convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let b = self.bias.map(|id| cx.param(id));
        Ok(cx
            .tape
            .conv2d(x, cx.param(self.weight), b, self.stride, self.pad)?)
    }
}

/// Depthwise `k×k` NCHW convolution with "same" padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl DepthwiseConv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                kaiming(&[channels, 1, kernel, kernel], kernel * kernel, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Result<Var> {
        Ok(cx.tape.depthwise_conv2d(
            x,
            cx.param(self.weight),
            Some(cx.param(self.bias)),
            1,
            self.pad,
        )?)
    }
}

/// NCHW batch norm with running statistics kept as store buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let stats = BnStats {
            mean: cx.store.value(self.running_mean).clone(),
            var: cx.store.value(self.running_var).clone(),
        };
        let (y, updated) = cx.tape.batch_norm(
            x,
            cx.param(self.gamma),
            cx.param(self.beta),
            &stats,
            cx.train,
            Self::MOMENTUM,
            Self::EPS,
        )?;
        if let Some(s) = updated {
            let mut u = cx.updates.borrow_mut();
            u.push((self.running_mean, s.mean));
            u.push((self.running_var, s.var));
        }
        Ok(y)
    }
}

/// `[N, H, W, C]` ↔ `[N, C, H, W]`.
pub fn to_nchw<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<Var> {
    Ok(tape.permute(x, &[0, 3, 1, 2])?)
}

pub fn to_nhwc<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<Var> {
    Ok(tape.permute(x, &[0, 2, 3, 1])?)
}
