//! Vector-quantization bottleneck with a straight-through estimator.

use rand::Rng;
use vadet_tensor::{CustomOp, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::losses::l2_norm;

pub const DEFAULT_CODES: usize = 512;
/// Weight of the commitment (encoder-side) term.
pub const COMMITMENT: f64 = 0.25;

/// A `K×d` table of code vectors stored as a parameter.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub table: ParamId,
    pub codes: usize,
    pub dim: usize,
}

impl Codebook {
    /// Entries drawn uniformly from `(-1/K, 1/K)`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        codes: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / codes.max(1) as f64;
        let table = store.add(name, Tensor::uniform(&[codes, dim], -bound, bound, rng));
        Self { table, codes, dim }
    }
}

/// Index of the nearest code (squared Euclidean distance) for every
/// `dim`-sized row of `features`. Ties resolve to the smallest index.
pub fn nearest_codes<T: Scalar>(features: &[T], table: &Tensor<T>) -> Result<Vec<usize>> {
    let (codes, dim) = match *table.shape() {
        [k, d] => (k, d),
        _ => return Err(Error::ScanShape(format!("codebook must be K×d, got {:?}", table.shape()))),
    };
    if codes == 0 {
        return Err(Error::EmptyCodebook);
    }
    if dim == 0 || features.len() % dim != 0 {
        return Err(Error::DimMismatch {
            features: features.len(),
            codes: dim,
        });
    }
    let t = table.data();
    Ok(features
        .chunks_exact(dim)
        .map(|z| {
            let mut best = (0, T::infinity());
            for j in 0..codes {
                let e = &t[j * dim..(j + 1) * dim];
                let dist: T = z.iter().zip(e).map(|(&a, &b)| (a - b) * (a - b)).sum();
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            best.0
        })
        .collect())
}

/// Forward value of the selected codes, identity backward to the encoder features.
struct StraightThrough;

impl<T: Scalar> CustomOp<T> for StraightThrough {
    fn name(&self) -> &'static str {
        "straight_through"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> vadet_tensor::Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.clone())])
    }
}

pub struct Quantized {
    /// Decoder input: exact copies of the selected codes, with gradients passed
    /// unchanged to the encoder features.
    pub z_q: Var,
    /// Selected codes connected to the codebook (shape of `z_e`).
    pub codes: Var,
    /// One index per spatial site, in row-major site order.
    pub indices: Vec<usize>,
    pub loss: Var,
}

/// Quantize `z_e: [.., d]` against `codebook: [K, d]`.
pub fn quantize<T: Scalar>(tape: &Tape<T>, z_e: Var, codebook: Var, beta: f64) -> Result<Quantized> {
    let ze = tape.value(z_e);
    let table = tape.value(codebook);
    let dim = *ze.shape().last().unwrap_or(&0);
    if table.rank() == 2 && table.shape()[0] == 0 {
        return Err(Error::EmptyCodebook);
    }
    if table.rank() != 2 || table.shape()[1] != dim {
        return Err(Error::DimMismatch {
            features: dim,
            codes: table.shape().get(1).copied().unwrap_or(0),
        });
    }
    let indices = nearest_codes(ze.data(), &table)?;
    let rows = tape.gather_rows(codebook, &indices)?;
    let codes = tape.reshape(rows, ze.shape())?;
    let z_q = tape.custom(&[z_e], tape.value(codes), Box::new(StraightThrough));
    let loss = vq_loss(tape, z_e, codes, beta)?;
    Ok(Quantized {
        z_q,
        codes,
        indices,
        loss,
    })
}

/// `‖sg(z_e) − z_q‖ + β‖z_e − sg(z_q)‖`, each norm the root of the sum of
/// squares over the whole tensor.
pub fn vq_loss<T: Scalar>(tape: &Tape<T>, z_e: Var, z_q: Var, beta: f64) -> Result<Var> {
    if tape.shape(z_e) != tape.shape(z_q) {
        return Err(Error::Tensor(vadet_tensor::TensorError::ShapeMismatch {
            op: "vq_loss",
            detail: format!("{:?} vs {:?}", tape.shape(z_e), tape.shape(z_q)),
        }));
    }
    let codebook_side = l2_norm(tape, tape.sub(tape.detach(z_e), z_q)?);
    let encoder_side = l2_norm(tape, tape.sub(z_e, tape.detach(z_q))?);
    Ok(tape.add(codebook_side, tape.scale(encoder_side, beta))?)
}
