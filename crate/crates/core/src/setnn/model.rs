use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use super::{DenseGrad, Mlp, MlpCache, MlpSpec, SetBatch};
use crate::aggregators::{aggregate, aggregate_backward, selected_rows, AggregatorSpec};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Matrix, Rng};
use crate::oracles::SetFunctionTable;
use crate::FORMAT_VERSION;

/// Largest ground set accepted by [`predict_set_function_over_powerset`].
pub const MAX_POWERSET_GROUND: usize = 12;

/// A full permutation-invariant predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct SetModel {
    pub phi: Mlp,
    pub agg: AggregatorSpec,
    pub rho: Mlp,
}

/// Gradients laid out like [`SetModel`]; `p` is present iff the exponent is
/// learnable.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub phi: Vec<DenseGrad>,
    pub rho: Vec<DenseGrad>,
    pub p: Option<f64>,
}

impl ModelGrads {
    /// Same order as [`SetModel::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.phi.iter().chain(&self.rho) {
            g.push(&mut out);
        }
        out.extend(self.p);
        out
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&v| v == 0.0)
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        for (net, grads) in [("phi", &self.phi), ("rho", &self.rho)] {
            for (i, g) in grads.iter().enumerate() {
                if !g.weight.is_finite() {
                    return Some(format!("{net}.layer{i}.weight.grad"));
                }
                if g.bias.iter().any(|v| !v.is_finite()) {
                    return Some(format!("{net}.layer{i}.bias.grad"));
                }
            }
        }
        match self.p {
            Some(p) if !p.is_finite() => Some("p.grad".into()),
            _ => None,
        }
    }
}

/// Intermediates of one [`SetModel::forward`] call.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    fingerprint: u64,
    rows: usize,
    sets: usize,
    phi: MlpCache,
    emb: Matrix,
    pooled: Matrix,
    rho: MlpCache,
    signature: u64,
}

impl ForwardCache {
    /// Element embeddings `φ(sᵢ)`, packed like the batch.
    pub fn embeddings(&self) -> &Matrix {
        &self.emb
    }

    /// Per-set pooled latent vectors.
    pub fn pooled(&self) -> &Matrix {
        &self.pooled
    }

    /// Hash of every discrete choice made in the pass (ReLU on/off pattern,
    /// Max/Min row picks, power-mean branch). Two passes with equal
    /// signatures differentiate through the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.signature
    }
}

/// Serialized form of a model: specs plus flat parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub format_version: u32,
    pub phi_spec: MlpSpec,
    pub aggregator: AggregatorSpec,
    pub rho_spec: MlpSpec,
    pub phi_params: Vec<f64>,
    pub rho_params: Vec<f64>,
    pub p: Option<f64>,
}

/// Builds a model with Glorot-uniform weights and zero biases. A learnable
/// power mean starts at `p = 1`.
pub fn init_model(
    phi_spec: &MlpSpec,
    agg: &AggregatorSpec,
    rho_spec: &MlpSpec,
    rng: &mut Rng,
) -> Result<SetModel> {
    check_compatible(phi_spec, agg, rho_spec)?;
    let mut agg = agg.clone();
    if agg.is_learnable() {
        agg.set_p(1.0);
    }
    let phi = Mlp::init(phi_spec, rng)?;
    let rho = Mlp::init(rho_spec, rng)?;
    Ok(SetModel { phi, agg, rho })
}

fn check_compatible(phi: &MlpSpec, agg: &AggregatorSpec, rho: &MlpSpec) -> Result<()> {
    phi.validate()?;
    rho.validate()?;
    agg.validate()?;
    if phi.output_width() != rho.input_width() {
        return Err(Error::config(format!(
            "phi outputs {} latent dimensions but rho expects {}",
            phi.output_width(),
            rho.input_width()
        )));
    }
    if agg.requires_positive() && !phi.positive_output {
        return Err(Error::config(format!(
            "{} aggregation needs phi.positive_output = true",
            agg.name()
        )));
    }
    Ok(())
}

fn hash_f64s(values: impl Iterator<Item = f64>, h: &mut impl Hasher) {
    for v in values {
        v.to_bits().hash(h);
    }
}

impl SetModel {
    pub fn latent_dim(&self) -> usize {
        self.phi.spec.output_width()
    }

    pub fn input_dim(&self) -> usize {
        self.phi.spec.input_width()
    }

    pub fn output_dim(&self) -> usize {
        self.rho.spec.output_width()
    }

    pub fn num_params(&self) -> usize {
        self.phi.num_params() + self.rho.num_params() + usize::from(self.agg.is_learnable())
    }

    /// All trainable parameters: φ layers, ρ layers, then `p` if learnable.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.phi.push_params(&mut out);
        self.rho.push_params(&mut out);
        if self.agg.is_learnable() {
            out.extend(self.agg.p());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let used = self.phi.load_params(params)?;
        let used = used + self.rho.load_params(&params[used..])?;
        if self.agg.is_learnable() {
            self.agg.set_p(params[used]);
        }
        Ok(())
    }

    /// Name of the first parameter tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        for (net, mlp) in [("phi", &self.phi), ("rho", &self.rho)] {
            for (i, l) in mlp.layers.iter().enumerate() {
                if !l.weight.is_finite() {
                    return Some(format!("{net}.layer{i}.weight"));
                }
                if l.bias.iter().any(|v| !v.is_finite()) {
                    return Some(format!("{net}.layer{i}.bias"));
                }
            }
        }
        match self.agg.p() {
            Some(p) if !p.is_finite() => Some("p".into()),
            _ => None,
        }
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        hash_f64s(self.params().into_iter(), &mut h);
        hash_f64s(self.agg.p().into_iter(), &mut h);
        self.agg.name().hash(&mut h);
        h.finish()
    }

    pub fn forward(&self, batch: &SetBatch) -> Result<(Matrix, ForwardCache)> {
        if batch.dim() != self.input_dim() {
            return Err(Error::Shape {
                op: "forward: element dimension vs phi input",
                left: (batch.elements().rows(), batch.dim()),
                right: (self.input_dim(), self.latent_dim()),
            });
        }
        let (emb, phi_cache) = self.phi.forward(batch.elements())?;
        let mut signature = DefaultHasher::new();
        let mut pooled = Matrix::zeros(batch.len(), self.latent_dim());
        for i in 0..batch.len() {
            let range = batch.set_range(i);
            let block = emb.row_block(range.start, range.end);
            let mask = vec![true; block.rows()];
            let pooled_row = aggregate(&block, &mask, &self.agg)?;
            pooled.row_mut(i).copy_from_slice(&pooled_row);
            if let Some(picks) = selected_rows(&block, &mask, &self.agg)? {
                picks.hash(&mut signature);
            }
        }
        let (out, rho_cache) = self.rho.forward(&pooled)?;
        for (mlp, cache) in [(&self.phi, &phi_cache), (&self.rho, &rho_cache)] {
            if mlp.spec.activation == Activation::Relu {
                for z in cache.pre_activations() {
                    for &v in z.data() {
                        (v > 0.0).hash(&mut signature);
                    }
                }
            }
        }
        if let Some(p) = self.agg.p() {
            (p.abs() < crate::aggregators::GEOMETRIC_BRANCH_EPS).hash(&mut signature);
        }
        if !out.is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        let cache = ForwardCache {
            fingerprint: self.fingerprint(),
            rows: batch.elements().rows(),
            sets: batch.len(),
            phi: phi_cache,
            emb,
            pooled,
            rho: rho_cache,
            signature: signature.finish(),
        };
        Ok((out, cache))
    }

    pub fn backward(
        &self,
        batch: &SetBatch,
        cache: &ForwardCache,
        loss_grad: &Matrix,
    ) -> Result<ModelGrads> {
        if cache.fingerprint != self.fingerprint()
            || cache.rows != batch.elements().rows()
            || cache.sets != batch.len()
        {
            return Err(Error::Contract(
                "forward cache does not match this model and batch".into(),
            ));
        }
        if loss_grad.shape() != (batch.len(), self.output_dim()) {
            return Err(Error::Shape {
                op: "backward loss gradient",
                left: loss_grad.shape(),
                right: (batch.len(), self.output_dim()),
            });
        }
        let (rho_grads, pooled_grad) = self.rho.backward(&cache.rho, loss_grad)?;
        let mut emb_grad = Matrix::zeros(cache.emb.rows(), cache.emb.cols());
        let mut grad_p = 0.0;
        for i in 0..batch.len() {
            let range = batch.set_range(i);
            let block = cache.emb.row_block(range.start, range.end);
            let mask = vec![true; block.rows()];
            let g = aggregate_backward(&block, &mask, &self.agg, pooled_grad.row(i))?;
            for (k, r) in range.enumerate() {
                emb_grad.row_mut(r).copy_from_slice(g.emb.row(k));
            }
            grad_p += g.p.unwrap_or(0.0);
        }
        let (phi_grads, _) = self.phi.backward(&cache.phi, &emb_grad)?;
        let grads = ModelGrads {
            phi: phi_grads,
            rho: rho_grads,
            p: self.agg.is_learnable().then_some(grad_p),
        };
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite(name));
        }
        Ok(grads)
    }

    /// Output for a single set given as element rows.
    pub fn predict(&self, set: &Matrix) -> Result<Vec<f64>> {
        let batch = SetBatch::unlabeled(std::slice::from_ref(set))?;
        Ok(self.forward(&batch)?.0.row(0).to_vec())
    }

    pub fn predict_batch(&self, batch: &SetBatch) -> Result<Matrix> {
        Ok(self.forward(batch)?.0)
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        let mut phi_params = Vec::new();
        self.phi.push_params(&mut phi_params);
        let mut rho_params = Vec::new();
        self.rho.push_params(&mut rho_params);
        ModelSnapshot {
            format_version: FORMAT_VERSION,
            phi_spec: self.phi.spec.clone(),
            aggregator: self.agg.clone(),
            rho_spec: self.rho.spec.clone(),
            phi_params,
            rho_params,
            p: self.agg.p(),
        }
    }

    pub fn from_snapshot(snap: &ModelSnapshot) -> Result<SetModel> {
        if snap.format_version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported model format_version {}",
                snap.format_version
            )));
        }
        check_compatible(&snap.phi_spec, &snap.aggregator, &snap.rho_spec)?;
        // parameters are overwritten below; the generator only sizes the layers
        let mut rng = Rng::new(0);
        let mut phi = Mlp::init(&snap.phi_spec, &mut rng)?;
        let mut rho = Mlp::init(&snap.rho_spec, &mut rng)?;
        if phi.load_params(&snap.phi_params)? != snap.phi_params.len()
            || rho.load_params(&snap.rho_params)? != snap.rho_params.len()
        {
            return Err(Error::Validation("parameter vector too long".into()));
        }
        let mut agg = snap.aggregator.clone();
        if let Some(p) = snap.p {
            agg.set_p(p);
        }
        Ok(SetModel { phi, agg, rho })
    }
}

/// Evaluates a scalar-output model on every non-empty subset of the ground
/// elements (rows of `ground`). Subset `S` is indexed by its bitmask.
///
/// The empty-set value is recorded only where it is unambiguous: a sum
/// aggregator under identity ρ gives the empty sum, 0.
pub fn predict_set_function_over_powerset(
    model: &SetModel,
    ground: &Matrix,
) -> Result<SetFunctionTable> {
    let n = ground.rows();
    if n > MAX_POWERSET_GROUND {
        return Err(Error::Resource(format!(
            "power set of {n} elements exceeds the limit of {MAX_POWERSET_GROUND}"
        )));
    }
    if n == 0 {
        return Err(Error::domain("empty ground set"));
    }
    if model.output_dim() != 1 {
        return Err(Error::config(format!(
            "set-function evaluation needs scalar output, model has {}",
            model.output_dim()
        )));
    }
    let subsets: Vec<Matrix> = (1u32..(1 << n))
        .map(|mask| {
            let rows: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
            ground.select_rows(&rows)
        })
        .collect();
    let out = model.predict_batch(&SetBatch::unlabeled(&subsets)?)?;
    let empty = (model.agg == AggregatorSpec::Sum && model.rho.spec.is_identity()).then_some(0.0);
    SetFunctionTable::new(n, empty, out.into_data())
}
