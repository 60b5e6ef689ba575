//! Dense `f64` tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles during a
//! forward pass; [`Tape::backward`] replays it in reverse. Trainable leaves
//! are created with [`Tape::param`], constants with [`Tape::constant`], and
//! [`Var::detach`] cuts a branch out of the gradient computation.
//!
//! ```
//! use ndgrad::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let loss = x.square().sum_all();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
//! ```

mod backward;
mod error;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use backward::Gradients;
pub use error::{NdError, Result};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use tape::{Tape, Var, EPS};
pub use tensor::Tensor;
