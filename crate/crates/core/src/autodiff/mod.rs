//! Dense `f64` tensors and tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node to a [`Graph`]; [`Graph::backward`] walks the
//! tape in reverse and delivers gradients only to leaves created with
//! [`Graph::param`]. Frozen weights enter as constants and never accumulate
//! gradient, which is how the adaptation engine keeps the backbone fixed.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub(crate) use graph::{entropy_of, softmax_in_place};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;
