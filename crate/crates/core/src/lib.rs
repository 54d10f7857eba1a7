pub mod bounds;
pub mod cloning;
pub mod envs;
pub mod error;
pub mod gaussian;
pub mod nes;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
