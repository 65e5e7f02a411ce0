//! Dense arithmetic, the tanh MLP and Adam: the substrate every training and
//! probing routine is built on.

mod adam;
mod matrix;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use matrix::{dot, euclidean, norm_sq, Matrix, Vector};
pub use mlp::{ForwardCache, Layer, Mlp};
