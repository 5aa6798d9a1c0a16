//! Evidence lower and upper bounds for Gaussian variational autoencoders,
//! with a probabilistic-PCA model whose exact evidence and posterior serve
//! as ground truth.

pub mod checks;
pub mod cli;
pub mod divergence;
pub mod error;
pub mod io;
pub mod linalg;
pub mod nets;
pub mod objectives;
pub mod ppca;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
