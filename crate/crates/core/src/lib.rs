pub mod concepts;
pub mod diffusion;
pub mod erasure;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod probes;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
