//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Computations are recorded on a [`Tape`] as applications of a small set of
//! [`Primitive`]s. Every backward rule is itself written in terms of those
//! primitives, so gradients recorded with `create_graph = true` can be
//! differentiated again. That is what makes it possible to differentiate
//! through a gradient step.
//!
//! ```
//! use metatrack_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::from_vec(vec![2.0]));
//! let sq = tape.mul(w, w).unwrap();
//! let cube = tape.mul(sq, w).unwrap();
//! let y = tape.sum(cube).unwrap();
//! let g = tape.backward(y, &[w], true).unwrap().get(w).unwrap();
//! assert_eq!(tape.value(g).data(), &[12.0]);
//! let g_sum = tape.sum(g).unwrap();
//! let h = tape.backward(g_sum, &[w], false).unwrap().get(w).unwrap();
//! assert_eq!(tape.value(h).data(), &[12.0]);
//! ```

mod error;
pub mod gradcheck;
pub mod kernels;
pub mod suite;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use kernels::AxisRange;
pub use tape::{GradMap, Primitive, Tape, Var};
pub use tensor::Tensor;
