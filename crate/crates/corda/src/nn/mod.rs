//! Minimal CPU neural-network kernels: convolution, activations, bilinear
//! resampling and SGD, each with an explicit backward pass.
//!
//! The network topology in this crate is fixed, so there is no autodiff tape;
//! every layer returns the cache its backward pass needs and gradients are
//! accumulated into the layer's own grad buffers.

pub mod conv;
pub mod ops;
pub mod sgd;

pub use conv::{Conv2d, ConvCtx};
pub use sgd::SgdMomentum;

/// Visitor over named parameter blocks. `name` is the canonical checkpoint
/// path of the block, `shape` its dimensions, `data`/`grad` flat storage.
pub type ParamFn<'a> = dyn FnMut(&str, &[usize], &mut [f32], &mut [f32]) + 'a;
