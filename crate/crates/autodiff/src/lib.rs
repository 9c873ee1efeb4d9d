//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`] and are borrowed by the graph; [`Graph::backward`] produces
//! gradients that are folded into [`ParamGrads`] and applied with
//! [`AdamState::step`].

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{AutodiffError, Result};
pub use graph::{Gradients, Graph, Var, LOG_CLAMP};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;
