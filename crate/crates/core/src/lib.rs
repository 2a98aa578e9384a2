//! Permutation-invariant set models built as `ρ(pool(φ(s₁), …, φ(sₙ)))`.
//!
//! Pooling is pluggable: sum and mean (Deep Sets), max (PointNet), and the
//! power mean `M_p`, which interpolates between them (harmonic at `p = −1`,
//! geometric at `0`, arithmetic at `1`, max as `p → ∞`). The exponent can be
//! fixed, searched over, or trained jointly with the networks.
//!
//! Alongside the models the crate ships Janossy pooling, synthetic set
//! tasks, a small training stack, exponent search strategies, and
//! brute-force property checkers.

pub mod aggregators;
pub mod error;
pub mod experiment;
pub mod janossy;
pub mod numerics;
pub mod oracles;
pub mod psearch;
pub mod setnn;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};

/// Version tag written into every serialized artifact.
pub const FORMAT_VERSION: u32 = 1;
