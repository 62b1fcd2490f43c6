//! Function-space optimization algorithms discretized in the tangent space of
//! neural network ansatz classes, with PDE model problems and verification
//! tooling.

pub mod error;
pub mod geometry;
pub mod linalg;
pub mod optim;
pub mod harness;
pub mod jet;
pub mod domain;
pub mod net;
pub mod problems;

pub use error::{Error, Result};
