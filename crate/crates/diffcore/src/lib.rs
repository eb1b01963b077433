//! Reverse-mode differentiation over `f64` n-dimensional arrays.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. The
//! operator set is deliberately small: dense and batched matmul, NCHW
//! convolution, broadcasting arithmetic, `exp`/`log`/`relu`, stable softmax,
//! layer normalization, seeded dropout, pooling, concat/reshape/permute and
//! embedding lookup. That is enough for slice-encoder CNNs and Transformer
//! aggregators.
//!
//! ```
//! use diffcore::{Mode, Tape};
//! use ndarray::arr1;
//!
//! let mut tape = Tape::new(Mode::Eval, 0);
//! let x = tape.input(arr1(&[1.0, 2.0]).into_dyn(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[2.0, 4.0]);
//! ```

mod check;
mod error;
mod ops;
mod tape;

pub use check::{backward_grad, forward_eval, grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use error::{DiffError, Result};
pub use ops::{broadcast_shape, LAYER_NORM_EPS};
pub use tape::{Array, DiffTensor, Gradients, Mode, Tape, Var};
