//! Unsupervised dialogue structure learning with a small transformer
//! encoder-decoder, Gumbel-Softmax state assignment and balance losses.

pub mod balance;
pub mod baselines;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::RngState;
