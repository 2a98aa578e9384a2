//! Set models `f(S) = ρ(aggregate(φ(s₁), …, φ(sₙ)))` with hand-written
//! forward and backward passes.

mod batch;
mod mlp;
mod model;

pub use batch::{SetBatch, Targets};
pub use mlp::{Dense, DenseGrad, Mlp, MlpCache, MlpSpec, POSITIVE_FLOOR};
pub use model::{
    init_model, predict_set_function_over_powerset, ForwardCache, ModelGrads, ModelSnapshot,
    SetModel, MAX_POWERSET_GROUND,
};
