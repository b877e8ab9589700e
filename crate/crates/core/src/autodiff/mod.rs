//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every forward op in creation order; [`Tape::backward`]
//! replays it in reverse. Parameters live in a [`ParamStore`] and are bound
//! as the first leaves of a tape via [`Tape::with_params`], so a fresh tape
//! per optimization step is cheap and single-owner.

mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::gradcheck;
pub use kernels::ConvGeom;
pub use params::{index_path, load_tensors, save_tensors, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
