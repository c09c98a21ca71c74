//! Adversarial attacks on the activations of a miniature decoder-only
//! language model, with the measurement pipeline that turns raw attack
//! outcomes into scaling-law estimates (success grids, sigmoid fits,
//! attack multiplier κ, attack resistance χ).

pub mod attack;
pub mod error;
pub mod grad_check;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
