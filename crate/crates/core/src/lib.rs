//! Weakly-supervised semantic segmentation from image-level labels.
//!
//! CAMs are distilled against the network's own correspondence structure,
//! refined with a variation-aware pixel-adaptive filter, and combined into
//! one composite training objective. Everything runs on a small fp64
//! reverse-mode tape ([`autograd`]).

pub mod autograd;
pub mod cam;
pub mod correspondence;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pnm;
pub mod resample;
pub mod tensor;
pub mod train;
pub mod varm;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
