//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only ever evaluates forward values, so it stays independent of
//! every adjoint it is used to check.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient comparison.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, element, analytic, finite-difference)` at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    fn record(&mut self, input: usize, elem: usize, analytic: f64, fd: f64, floor: f64) {
        if fd.abs() <= 1e-8 && analytic.abs() <= 1e-8 {
            return;
        }
        self.checked += 1;
        let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor);
        if self.worst.is_none() || err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = Some((input, elem, analytic, fd));
        }
    }
}

/// Finite-difference settings.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so that elements whose true
    /// gradient is near zero are judged on absolute error instead.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-3,
        }
    }
}

impl GradCheck {
    /// Compare every element of every input.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
    where
        F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
    {
        let picks: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
            .collect();
        self.run_at(inputs, &picks, f)
    }

    /// Compare only the listed `(input, element)` coordinates.
    pub fn run_at<F>(&self, inputs: &[Tensor<f64>], picks: &[(usize, usize)], f: F) -> Result<GradReport>
    where
        F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
    {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        drop(grads);

        let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&tape, &vars)?;
            Ok(tape.value(out).item())
        };
        let mut report = GradReport::default();
        let mut work = inputs.to_vec();
        for &(i, e) in picks {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + self.step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - self.step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * self.step);
            report.record(i, e, analytic[i].data()[e], fd, self.floor);
        }
        Ok(report)
    }
}
