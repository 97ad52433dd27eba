//! Reverse-mode differentiation over small dense tensors.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar node sweeps the tape in reverse and leaves
//! `d loss / d leaf` on every leaf created with `requires_grad`.
//!
//! ```
//! use mmib::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq, None).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use tape::{Tape, Var, MIN_ROW_NORM};
pub use tensor::{Scalar, Tensor};
