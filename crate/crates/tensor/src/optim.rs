use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learning rate used by the reference training recipe.
pub const DEFAULT_LR: f64 = 2e-4;

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(DEFAULT_LR, 0.01)
    }
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Update every trainable parameter from its gradient. Gradients are left in place.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = params.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (id, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            let n = grad.numel();
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw",
                    detail: format!("state for `{}` has {} entries, grad {n}", p.name, m.len()),
                });
            }
            let g = grad.data().to_vec();
            let w = p.value.data_mut();
            for i in 0..n {
                let gi = g[i].as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                let wi = w[i].as_f64() * decay - self.lr * update;
                w[i] = T::lit(wi);
            }
        }
        Ok(())
    }

    /// Step count and moments keyed by parameter name, in a form the
    /// checkpoint writer accepts.
    pub fn state<T: Scalar>(&self, params: &ParamStore<T>) -> ParamStore<f64> {
        let mut out = ParamStore::new();
        out.add_buffer(STEP_KEY, Tensor::scalar(self.step as f64));
        for (id, p) in params.iter() {
            if let Some(Some((m, v))) = self.moments.get(id.0) {
                out.add_buffer(format!("m.{}", p.name), Tensor::from_fn(&[m.len()], |i| m[i]));
                out.add_buffer(format!("v.{}", p.name), Tensor::from_fn(&[v.len()], |i| v[i]));
            }
        }
        out
    }

    /// Inverse of [`AdamW::state`].
    pub fn load_state<T: Scalar>(&mut self, params: &ParamStore<T>, entries: Vec<(String, Tensor<f64>)>) -> Result<()> {
        let mut step = None;
        let mut moments: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; params.len()];
        let mut halves: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = vec![(None, None); params.len()];
        for (name, t) in entries {
            if name == STEP_KEY {
                step = Some(t.item() as u64);
                continue;
            }
            let (kind, pname) = name
                .split_once('.')
                .ok_or_else(|| TensorError::Checkpoint(format!("unexpected optimizer entry `{name}`")))?;
            let id = params
                .id(pname)
                .ok_or_else(|| TensorError::Checkpoint(format!("optimizer state for unknown `{pname}`")))?;
            if t.numel() != params.value(id).numel() {
                return Err(TensorError::Checkpoint(format!("optimizer state for `{pname}` has wrong size")));
            }
            match kind {
                "m" => halves[id.0].0 = Some(t.into_vec()),
                "v" => halves[id.0].1 = Some(t.into_vec()),
                _ => return Err(TensorError::Checkpoint(format!("unexpected optimizer entry `{name}`"))),
            }
        }
        for (slot, pair) in moments.iter_mut().zip(halves) {
            match pair {
                (Some(m), Some(v)) => *slot = Some((m, v)),
                (None, None) => {}
                _ => return Err(TensorError::Checkpoint("optimizer moments incomplete".into())),
            }
        }
        self.step = step.ok_or_else(|| TensorError::Checkpoint("optimizer step missing".into()))?;
        self.moments = moments;
        Ok(())
    }
}

const STEP_KEY: &str = "adamw.step";
