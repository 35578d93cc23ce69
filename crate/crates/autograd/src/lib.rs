//! Reverse-mode automatic differentiation over dense row-major `f64` tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s on a tape.
//! Calling [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar with respect to every parameter (and every
//! intermediate) that took part in the computation.
//!
//! Parameters live in a [`ParamStore`] outside the graph, so a fresh graph is
//! built for every forward pass while parameters persist across steps.

mod array;
mod conv;
pub mod gradcheck;
mod graph;
mod linalg;
pub mod nn;
mod ops;
pub mod optim;
mod params;

pub use array::Array;
pub use graph::{Grads, Graph, Var};
pub use params::{ParamId, ParamStore};
