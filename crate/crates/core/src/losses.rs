//! Training objectives for frame prediction and flow reconstruction.
//!
//! Every `‖·‖` is the root of the sum of squares over a whole sample. Inputs
//! are batched `[N, C, H, W]`; per-sample losses are averaged over the batch,
//! so a batch of one is exactly the single-sample loss.

use vadet_tensor::{CustomOp, Scalar, Tape, Tensor, TensorError, Var};

use crate::error::{Error, Result};

/// Charbonnier constant of the motion-difference loss.
pub const MOTION_EPS: f64 = 0.001;
/// Weight of the motion-difference term in the flow objective.
pub const MOTION_WEIGHT: f64 = 0.01;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Euclidean norm of each row of a `[N, M]` matrix; the subgradient at a zero
/// row is taken as zero.
struct RowNorms;

impl<T: Scalar> CustomOp<T> for RowNorms {
    fn name(&self) -> &'static str {
        "row_norms"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> vadet_tensor::Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let width = x.shape()[1];
        let mut g = vec![T::zero(); x.numel()];
        for (r, row) in x.data().chunks_exact(width).enumerate() {
            let norm = output.data()[r];
            if norm > T::zero() {
                let scale = grad.data()[r] / norm;
                for (o, &v) in g[r * width..(r + 1) * width].iter_mut().zip(row) {
                    *o = v * scale;
                }
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), g)?)])
    }
}

/// Per-sample norms `[N]` of an `[N, ...]` tensor.
pub fn sample_norms<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    let n = *shape.first().ok_or_else(|| shape_error("sample_norms", "rank-0 input".into()))?;
    let width = shape[1..].iter().product::<usize>();
    let rows = tape.reshape(x, &[n, width])?;
    let v = tape.value(rows);
    let norms: Vec<T> = v
        .data()
        .chunks_exact(width.max(1))
        .map(|r| r.iter().map(|&a| a * a).sum::<T>().sqrt())
        .collect();
    let norms = if width == 0 { vec![T::zero(); n] } else { norms };
    Ok(tape.custom(&[rows], Tensor::new(vec![n], norms)?, Box::new(RowNorms)))
}

/// Norm of the whole tensor.
pub fn l2_norm<T: Scalar>(tape: &Tape<T>, x: Var) -> Var {
    let numel: usize = tape.shape(x).iter().product();
    let flat = tape.reshape(x, &[1, numel]).expect("numel-preserving reshape");
    let norm = sample_norms(tape, flat).expect("rank-2 input");
    tape.reshape(norm, &[]).expect("single element")
}

fn shape_error(op: &'static str, detail: String) -> Error {
    Error::Tensor(TensorError::ShapeMismatch { op, detail })
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, vars: &[Var]) -> Result<Vec<usize>> {
    let s = tape.shape(vars[0]);
    for &v in &vars[1..] {
        if tape.shape(v) != s {
            return Err(shape_error(op, format!("{:?} vs {:?}", s, tape.shape(v))));
        }
    }
    if s.len() != 4 {
        return Err(shape_error(op, format!("expected [N, C, H, W], got {s:?}")));
    }
    Ok(s)
}

fn batch_mean<T: Scalar>(tape: &Tape<T>, per_sample: Var) -> Var {
    tape.mean(per_sample)
}

/// `‖I − Î‖` of predicted frames.
pub fn prediction_loss<T: Scalar>(tape: &Tape<T>, target: Var, pred: Var) -> Result<Var> {
    same_shape(tape, "prediction_loss", &[target, pred])?;
    let diff = tape.sub(target, pred)?;
    Ok(batch_mean(tape, sample_norms(tape, diff)?))
}

/// `‖O − Ô‖` of reconstructed flows.
pub fn recon_loss<T: Scalar>(tape: &Tape<T>, target: Var, pred: Var) -> Result<Var> {
    same_shape(tape, "recon_loss", &[target, pred])?;
    let diff = tape.sub(target, pred)?;
    Ok(batch_mean(tape, sample_norms(tape, diff)?))
}

/// Unnormalized sum over all pixels of the L1 gap between absolute vertical
/// (and horizontal) intensity differences of target and prediction.
pub fn gradient_loss<T: Scalar>(tape: &Tape<T>, target: Var, pred: Var) -> Result<Var> {
    let s = same_shape(tape, "gradient_loss", &[target, pred])?;
    let (n, h, w) = (s[0], s[2], s[3]);
    if h < 2 || w < 2 {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            min: 2,
        });
    }
    let abs_diff = |x: Var, axis: usize, len: usize| -> Result<Var> {
        let hi = tape.slice(x, axis, 1, len)?;
        let lo = tape.slice(x, axis, 0, len - 1)?;
        Ok(tape.abs(tape.sub(hi, lo)?))
    };
    let vert = tape.abs(tape.sub(abs_diff(target, 2, h)?, abs_diff(pred, 2, h)?)?);
    let horiz = tape.abs(tape.sub(abs_diff(target, 3, w)?, abs_diff(pred, 3, w)?)?);
    let total = tape.add(tape.sum(vert), tape.sum(horiz))?;
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Normalized `size×size` Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    let mut out = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            out.push(a * b / (sum * sum));
        }
    }
    out
}

/// Mean SSIM over all valid 11×11 Gaussian windows and channels, for signals
/// with dynamic range `range`.
pub fn ssim<T: Scalar>(tape: &Tape<T>, x: Var, y: Var, range: f64) -> Result<Var> {
    let s = same_shape(tape, "ssim", &[x, y])?;
    let (c, h, w) = (s[1], s[2], s[3]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            min: SSIM_WINDOW,
        });
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let kernel = Tensor::from_fn(&[c, 1, SSIM_WINDOW, SSIM_WINDOW], |i| {
        T::lit(win[i % (SSIM_WINDOW * SSIM_WINDOW)])
    });
    let kernel = tape.constant(kernel);
    let blur = |v: Var| -> Result<Var> { Ok(tape.depthwise_conv2d(v, kernel, None, 1, 0)?) };
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mu_x = blur(x)?;
    let mu_y = blur(y)?;
    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(blur(tape.mul(x, x)?)?, mu_xx)?;
    let var_y = tape.sub(blur(tape.mul(y, y)?)?, mu_yy)?;
    let cov = tape.sub(blur(tape.mul(x, y)?)?, mu_xy)?;
    let num = tape.mul(
        tape.add_scalar(tape.scale(mu_xy, 2.0), c1),
        tape.add_scalar(tape.scale(cov, 2.0), c2),
    )?;
    let den = tape.mul(
        tape.add_scalar(tape.add(mu_xx, mu_yy)?, c1),
        tape.add_scalar(tape.add(var_x, var_y)?, c2),
    )?;
    Ok(tape.mean(tape.div(num, den)?))
}

/// `1 − SSIM(O, Ô)`.
pub fn ssim_loss<T: Scalar>(tape: &Tape<T>, target: Var, pred: Var, range: f64) -> Result<Var> {
    let s = ssim(tape, target, pred, range)?;
    Ok(tape.add_scalar(tape.neg(s), 1.0))
}

/// `sqrt((‖O − O_prev‖ − ‖Ô − O_prev‖)² + ε²)` per sample, averaged over the
/// samples flagged in `valid` (those that have a previous flow). Returns
/// `None` when no sample qualifies.
pub fn motion_diff_loss_masked<T: Scalar>(
    tape: &Tape<T>,
    target: Var,
    pred: Var,
    prev: Var,
    valid: &[bool],
) -> Result<Option<Var>> {
    let s = same_shape(tape, "motion_diff_loss", &[target, pred, prev])?;
    if valid.len() != s[0] {
        return Err(Error::LengthMismatch(valid.len(), s[0]));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Ok(None);
    }
    let observed = tape.detach(sample_norms(tape, tape.sub(target, prev)?)?);
    let predicted = sample_norms(tape, tape.sub(pred, prev)?)?;
    let gap = tape.sub(observed, predicted)?;
    let smooth = tape.sqrt(tape.add_scalar(tape.square(gap)?, MOTION_EPS * MOTION_EPS));
    let mask = tape.constant(Tensor::from_fn(&[s[0]], |i| {
        if valid[i] {
            T::one()
        } else {
            T::zero()
        }
    }));
    let total = tape.sum(tape.mul(smooth, mask)?);
    Ok(Some(tape.scale(total, 1.0 / count as f64)))
}

/// Motion-difference loss over every sample of the batch.
pub fn motion_diff_loss<T: Scalar>(tape: &Tape<T>, target: Var, pred: Var, prev: Var) -> Result<Var> {
    let n = tape.shape(target).first().copied().unwrap_or(0);
    motion_diff_loss_masked(tape, target, pred, prev, &vec![true; n])?
        .ok_or_else(|| shape_error("motion_diff_loss", "empty batch".into()))
}

/// Term values and the weighted total of one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// `(name, weight, value)` in summation order.
    pub terms: Vec<(&'static str, f64, f64)>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.0 == name).map(|t| t.2)
    }
}

fn weighted_sum<T: Scalar>(tape: &Tape<T>, terms: &[(&'static str, f64, Var)]) -> Result<(Var, LossReport)> {
    let mut total: Option<Var> = None;
    let mut report = Vec::with_capacity(terms.len());
    for &(name, weight, v) in terms {
        let term = if weight == 1.0 { v } else { tape.scale(v, weight) };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
        report.push((name, weight, tape.value(v).item().as_f64()));
    }
    let total = total.expect("at least one term");
    let value = tape.value(total).item().as_f64();
    Ok((
        total,
        LossReport {
            terms: report,
            total: value,
        },
    ))
}

/// `L_p + L_vq + L_gd`.
pub fn composite_fp<T: Scalar>(
    tape: &Tape<T>,
    prediction: Var,
    vq: Var,
    gradient: Var,
) -> Result<(Var, LossReport)> {
    composite_fp_weighted(tape, prediction, vq, gradient, 1.0)
}

/// `L_p + L_vq + w·L_gd`; the trainer uses `w = 1/(H·W)` to turn the summed
/// gradient term into a per-pixel mean.
pub fn composite_fp_weighted<T: Scalar>(
    tape: &Tape<T>,
    prediction: Var,
    vq: Var,
    gradient: Var,
    gradient_weight: f64,
) -> Result<(Var, LossReport)> {
    weighted_sum(
        tape,
        &[("l_p", 1.0, prediction), ("l_vq", 1.0, vq), ("l_gd", gradient_weight, gradient)],
    )
}

/// `L_r + L_vq + L_sim + 0.01 L_md`; the motion term is absent for samples at
/// the start of a clip.
pub fn composite_fr<T: Scalar>(
    tape: &Tape<T>,
    recon: Var,
    vq: Var,
    ssim: Var,
    motion: Option<Var>,
) -> Result<(Var, LossReport)> {
    let mut terms = vec![("l_r", 1.0, recon), ("l_vq", 1.0, vq), ("l_sim", 1.0, ssim)];
    if let Some(m) = motion {
        terms.push(("l_md", MOTION_WEIGHT, m));
    }
    weighted_sum(tape, &terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(w[0], w[120]);
        assert_eq!(w[5 * 11], w[5]);
        assert!(w[60] > w[59]);
    }

    #[test]
    fn zero_row_norm_has_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let n = tape.sum(sample_norms(&tape, x).unwrap());
        let g = tape.backward(n).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
