//! Simulating large transformers with calls to a length-capped small-transformer oracle.

pub mod audit;
pub mod construct;
pub mod error;
pub mod exec;
pub mod harness;
pub mod mlp;
pub mod oracle;
pub mod reference;
pub mod reverse;
pub mod rng;
pub mod sim_linear;
pub mod sim_quadratic;
pub mod tensor;

#[cfg(test)]
mod test_support;

pub use error::{Error, Result};
pub use tensor::{MaskKind, Matrix};
