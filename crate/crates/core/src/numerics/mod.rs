//! Dense matrices, a splittable seeded generator, and the scalar kernels
//! (activations, log-sum-exp, pairwise summation) the rest of the crate uses.

mod kernels;
mod matrix;
mod rng;

pub use kernels::{logsumexp, pairwise_sum, softplus, Activation};
pub use matrix::Matrix;
pub use rng::Rng;
