//! Energy-based model training at desk scale.
//!
//! The crate trains unconditional energy models and joint
//! classifier/energy models with SGLD negative sampling. Chains start from
//! a replay buffer of past negatives or, with probability `rho`, from a
//! single Gaussian fitted to the training set. Energies are produced by a
//! dedicated scalar energy head that can be L2-regularized independently of
//! the classifier logits.

pub mod bench;
pub mod binio;
pub mod data;
pub mod diag;
pub mod error;
pub mod init;
pub mod net;
pub mod objectives;
pub mod rng;
pub mod sgld;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
