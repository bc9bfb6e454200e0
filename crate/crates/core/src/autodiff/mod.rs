//! Reverse-mode automatic differentiation over tensors.
//!
//! A [`Graph`] is a tape built as the computation runs, so data-dependent
//! control flow (one inner update per token of a sequence) needs nothing
//! special: the unrolled loop simply becomes part of the tape.
//!
//! ```
//! use ttt_seg::autodiff::Graph;
//! use ttt_seg::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(&[1.0, 2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
//! ```

mod exec;
mod graph;
pub mod gradcheck;

pub use exec::{Eager, Exec};
pub use gradcheck::{gradcheck, relative_error, GradEntry, GradReport, GradcheckOptions};
pub use graph::{Gradients, Graph, NodeId, OpKind};
