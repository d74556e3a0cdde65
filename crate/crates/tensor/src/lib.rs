//! Dense tensors with a reverse-mode gradient tape, an AdamW optimizer and a
//! small binary checkpoint format.
//!
//! ```
//! use vadet_tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{AdamW, DEFAULT_LR};
pub use param::{Param, ParamId, ParamStore};
pub use scalar::{gemm, DType, Scalar};
pub use tape::{softplus, BnStats, CustomOp, Grads, Tape, Var};
pub use tensor::Tensor;
