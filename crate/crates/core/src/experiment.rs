//! Experiment configuration and the pipelines behind the command-line tool.
//!
//! A run is a pure function of its configuration: data, split and
//! initialization each draw from their own fork of `Rng::new(seed)`, and
//! training shuffles from `train.seed`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::aggregators::{AggregatorSpec, MonotoneMap};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Matrix, Rng};
use crate::oracles::{
    check_modularity, check_permutation_invariance, check_submodularity, check_sum_isomorphism, grad_check,
    CheckReport, FirstElementProbe, SetPredictor,
};
use crate::psearch::{gradient_search, SearchConfig, SearchResult};
use crate::setnn::{init_model, predict_set_function_over_powerset, MlpSpec, SetBatch, SetModel};
use crate::tasks::{generate, split, Dataset, Distribution, SetSize, TaskKind, TaskSpec};
use crate::training::{evaluate, train, Loss, Metrics, TrainConfig, TrainReport, TrainState};
use crate::FORMAT_VERSION;

/// Stream keys for `Rng::new(seed).fork(..)`.
const DATA_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;
const CHECK_STREAM: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// φ widths, input (= task.d) to latent dimension.
    pub phi: Vec<usize>,
    /// ρ widths, latent dimension to output; `[N]` alone is the identity.
    pub rho: Vec<usize>,
    pub activation: Activation,
    pub aggregator: AggregatorSpec,
    /// Softplus output map on φ; defaults to whether the aggregator needs
    /// positive inputs.
    pub positive_embeddings: Option<bool>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            phi: vec![1, 32, 16],
            rho: vec![16, 32, 1],
            activation: Activation::Tanh,
            aggregator: AggregatorSpec::Mean,
            positive_embeddings: None,
        }
    }
}

impl ModelConfig {
    pub fn phi_spec(&self) -> MlpSpec {
        let positive = self
            .positive_embeddings
            .unwrap_or_else(|| self.aggregator.requires_positive());
        MlpSpec::new(self.phi.clone(), self.activation).with_positive_output(positive)
    }

    pub fn rho_spec(&self) -> MlpSpec {
        MlpSpec::new(self.rho.clone(), self.activation)
    }

    /// Same architecture with latent dimension `n`.
    pub fn with_latent(&self, n: usize) -> ModelConfig {
        let mut c = self.clone();
        if let Some(last) = c.phi.last_mut() {
            *last = n;
        }
        if let Some(first) = c.rho.first_mut() {
            *first = n;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_sets: usize,
    pub split: [f64; 3],
    /// Load this NDJSON dataset instead of generating one.
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_sets: 2000,
            split: [0.8, 0.1, 0.1],
            path: None,
        }
    }
}

/// Sizes and tolerances of the oracle suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckConfig {
    pub n_models: usize,
    pub sets_per_model: usize,
    pub max_set_size: usize,
    pub ground_size: usize,
    pub invariance_tol: f64,
    pub subset_tol: f64,
    pub grad_h: f64,
    pub grad_tol: f64,
    pub isomorphism_tol: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            n_models: 20,
            sets_per_model: 4,
            max_set_size: 6,
            ground_size: 5,
            invariance_tol: 1e-9,
            subset_tol: 1e-9,
            grad_h: 1e-5,
            grad_tol: 1e-5,
            isomorphism_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub task: TaskSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub search: Option<SearchConfig>,
    pub check: CheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            format_version: FORMAT_VERSION,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            task: TaskSpec::new(TaskKind::Median { dist: Distribution::Uniform }, SetSize::Fixed(16), 1),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            search: None,
            check: CheckConfig::default(),
        }
    }
}

/// Sets `path` (dot-separated) in a JSON object tree. Missing objects on
/// the way are copied from `defaults` when it has them, so a single nested
/// key can be overridden without restating its siblings. The value is parsed
/// as JSON when possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, defaults: &Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("malformed override key `{path}`")));
    }
    let mut node = root;
    let mut fallback = Some(defaults);
    for (i, key) in keys.iter().enumerate() {
        if node.is_null() {
            *node = match fallback {
                Some(d) if d.is_object() => d.clone(),
                _ => Value::Object(Default::default()),
            };
        }
        let Some(map) = node.as_object_mut() else {
            return Err(Error::config(format!(
                "override `{path}`: `{}` is not an object",
                keys[..i].join(".")
            )));
        };
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        fallback = fallback.and_then(|d| d.get(*key));
        node = map.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns at the last key")
}

impl ExperimentConfig {
    /// Parses `text` (or an empty object when `None`), applies `key=value`
    /// overrides, fills defaults and validates.
    pub fn from_json(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut root: Value = match text {
            Some(t) => serde_json::from_str(t).map_err(|e| Error::config(format!("config: {e}")))?,
            None => Value::Object(Default::default()),
        };
        let defaults = serde_json::to_value(ExperimentConfig::default())?;
        for (k, v) in overrides {
            apply_override(&mut root, &defaults, k, v)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(root).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::config(format!("unsupported format_version {}", self.format_version)));
        }
        self.task.validate()?;
        self.train.validate()?;
        if let Some(s) = &self.search {
            s.validate()?;
        }
        let m = &self.model;
        if m.phi.first() != Some(&self.task.d) {
            return Err(Error::config(format!(
                "model.phi must start with the element dimension {}, got {:?}",
                self.task.d, m.phi
            )));
        }
        if m.phi.last() != m.rho.first() {
            return Err(Error::config(format!(
                "model.phi ends with {:?} but model.rho starts with {:?}",
                m.phi.last(),
                m.rho.first()
            )));
        }
        let out = *m.rho.last().ok_or_else(|| Error::config("model.rho is empty"))?;
        match (self.task.num_classes(), self.train.loss) {
            (None, Loss::Mse) if out == 1 => {}
            (Some(c), Loss::CrossEntropy) if out == c => {}
            (classes, loss) => {
                return Err(Error::config(format!(
                    "model output width {out} and train.loss {loss:?} do not fit a task with {}",
                    classes.map_or("scalar targets".to_string(), |c| format!("{c} classes"))
                )))
            }
        }
        if m.aggregator.requires_positive() && m.positive_embeddings == Some(false) {
            return Err(Error::config(format!(
                "{} aggregation needs model.positive_embeddings = true",
                m.aggregator.name()
            )));
        }
        Ok(())
    }

    fn root_rng(&self) -> Rng {
        Rng::new(self.seed)
    }

    pub fn build_model(&self) -> Result<SetModel> {
        build_model(&self.model, &mut self.root_rng().fork(INIT_STREAM))
    }

    /// The configured dataset file, or freshly generated data.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data.path {
            Some(p) => Dataset::load(p),
            None => self.generate_dataset(),
        }
    }

    pub fn generate_dataset(&self) -> Result<Dataset> {
        generate(&self.task, self.data.n_sets, &self.root_rng().fork(DATA_STREAM))
    }

    pub fn split(&self, ds: &Dataset) -> Result<(Dataset, Dataset, Dataset)> {
        split(ds, self.data.split, &mut self.root_rng().fork(SPLIT_STREAM))
    }
}

pub fn build_model(model: &ModelConfig, rng: &mut Rng) -> Result<SetModel> {
    init_model(&model.phi_spec(), &model.aggregator, &model.rho_spec(), rng)
}

/// Outcome of [`run_training`].
pub struct TrainRun {
    pub model: SetModel,
    pub report: TrainReport,
    pub state: TrainState,
    pub test: Metrics,
}

/// Trains on the train split with validation each epoch, then scores the
/// test split. `resume` continues from a saved model and optimizer state.
pub fn run_training(cfg: &ExperimentConfig, data: &Dataset, resume: Option<(SetModel, TrainState)>) -> Result<TrainRun> {
    let (tr, va, te) = cfg.split(data)?;
    let (model, state) = match resume {
        Some((m, s)) => (m, Some(s)),
        None => (cfg.build_model()?, None),
    };
    let (model, report, state) = train(model, &tr.batch, Some(&va.batch), &cfg.train, state)?;
    let test = evaluate(&model, &te.batch, cfg.train.loss)?;
    Ok(TrainRun {
        model,
        report,
        state,
        test,
    })
}

/// Headline score of a metrics record: RMSE for regression, loss otherwise.
pub fn headline(m: &Metrics) -> f64 {
    m.rmse.unwrap_or(m.loss)
}

/// Objective for exponent search: train a fresh model with a fixed power
/// mean at `p` (same initialization for every `p`) and return the
/// validation score of the final epoch.
pub fn objective_at_p(cfg: &ExperimentConfig, train_set: &SetBatch, val_set: &SetBatch, p: f64) -> Result<f64> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.aggregator = AggregatorSpec::power_mean(p);
    let model = build_model(&model_cfg, &mut cfg.root_rng().fork(INIT_STREAM))?;
    let (model, _, _) = train(model, train_set, None, &cfg.train, None)?;
    Ok(headline(&evaluate(&model, val_set, cfg.train.loss)?))
}

/// Joint gradient search: the configured model with a learnable power mean
/// starting at `p = 1`, trained on `train_set` and scored on `val_set`.
pub fn gradient_p_search(
    cfg: &ExperimentConfig,
    train_set: &SetBatch,
    val_set: &SetBatch,
    search: &SearchConfig,
) -> Result<SearchResult> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.aggregator = AggregatorSpec::learnable_power_mean(1.0);
    let model = build_model(&model_cfg, &mut cfg.root_rng().fork(INIT_STREAM))?;
    Ok(gradient_search(model, train_set, Some(val_set), &cfg.train, search)?.0)
}

/// One row of a latent-dimension sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub latent: usize,
    pub rmse: f64,
}

/// Trains one model per `(seed, latent)` pair (in parallel) and reports the
/// test-split score. Each seed sets both `seed` and `train.seed`.
pub fn latent_sweep(cfg: &ExperimentConfig, dims: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::config("latent dimensions must be a non-empty list of positive counts"));
    }
    if cfg.task.is_classification() {
        return Err(Error::config("latent sweeps need a regression task"));
    }
    let jobs: Vec<(u64, usize)> = seeds.iter().flat_map(|&s| dims.iter().map(move |&n| (s, n))).collect();
    jobs.par_iter()
        .map(|&(seed, n)| {
            let mut c = cfg.clone();
            c.seed = seed;
            c.train.seed = seed;
            c.model = cfg.model.with_latent(n);
            c.validate()?;
            let data = c.dataset()?;
            let run = run_training(&c, &data, None)?;
            Ok(SweepRow {
                seed,
                latent: n,
                rmse: headline(&run.test),
            })
        })
        .collect()
}

/// Aggregators exercised by the oracle suite.
pub fn suite_aggregators(rng: &mut Rng) -> Vec<AggregatorSpec> {
    vec![
        AggregatorSpec::Sum,
        AggregatorSpec::Mean,
        AggregatorSpec::Max,
        AggregatorSpec::Min,
        AggregatorSpec::LogSumExpMean,
        AggregatorSpec::power_mean(rng.uniform_range(-6.0, 6.0)),
        AggregatorSpec::learnable_power_mean(1.0),
        AggregatorSpec::QuasiArithmetic { g: MonotoneMap::Ln },
    ]
}

fn random_sets(rng: &mut Rng, count: usize, max_size: usize, d: usize) -> Vec<Matrix> {
    (0..count)
        .map(|_| {
            let n = 1 + rng.below(max_size);
            Matrix::new(n, d, (0..n * d).map(|_| rng.normal()).collect()).expect("sized")
        })
        .collect()
}

fn small_model(d: usize, latent: usize, out: usize, agg: &AggregatorSpec, identity_rho: bool, rng: &mut Rng) -> Result<SetModel> {
    let phi = MlpSpec::new(vec![d, 8, latent], Activation::Tanh).with_positive_output(agg.requires_positive());
    let rho = if identity_rho {
        MlpSpec::identity(latent)
    } else {
        MlpSpec::new(vec![latent, 8, out], Activation::Tanh)
    };
    let mut m = init_model(&phi, agg, &rho, rng)?;
    if agg.is_learnable() {
        // move off the initial point so the p-gradient is exercised generically
        m.agg.set_p(rng.uniform_range(-3.0, 3.0));
    }
    Ok(m)
}

/// Wraps a model so the permutation check sees an order-sensitive predictor.
struct OrderSensitive<'a>(&'a SetModel);

impl SetPredictor for OrderSensitive<'_> {
    fn predict_set(&self, set: &Matrix) -> Result<Vec<f64>> {
        let mut out = self.0.predict(set)?;
        out[0] += FirstElementProbe.predict_set(set)?[0];
        Ok(out)
    }
}

/// Runs every registered oracle with the sizes in `cfg.check`. With
/// `inject_order_sensitive` the permutation check is pointed at a predictor
/// that adds the first element's leading coordinate to its output.
pub fn run_checks(cfg: &ExperimentConfig, inject_order_sensitive: bool) -> Result<Vec<CheckReport>> {
    let c = &cfg.check;
    let d = cfg.task.d;
    let mut rng = cfg.root_rng().fork(CHECK_STREAM);
    let mut reports = Vec::new();

    let mut worst: Option<CheckReport> = None;
    for i in 0..c.n_models {
        let aggs = suite_aggregators(&mut rng);
        let agg = aggs[i % aggs.len()].clone();
        let model = small_model(d, 4, 1, &agg, false, &mut rng)?;
        let sets = random_sets(&mut rng, c.sets_per_model, c.max_set_size, d);
        let mut prng = rng.fork(i as u64);
        let r = if inject_order_sensitive {
            check_permutation_invariance(&OrderSensitive(&model), &sets, 10, c.invariance_tol, &mut prng)?
        } else {
            check_permutation_invariance(&model, &sets, 10, c.invariance_tol, &mut prng)?
        };
        if worst.as_ref().is_none_or(|w| r.worst_violation > w.worst_violation) {
            worst = Some(r);
        }
    }
    if let Some(w) = worst {
        reports.push(w);
    }

    let ground = Matrix::new(c.ground_size, d, (0..c.ground_size * d).map(|_| rng.normal()).collect())?;
    let sum_model = small_model(d, 1, 1, &AggregatorSpec::Sum, true, &mut rng)?;
    reports.push(check_modularity(&predict_set_function_over_powerset(&sum_model, &ground)?, c.subset_tol)?);
    let max_model = small_model(d, 1, 1, &AggregatorSpec::Max, true, &mut rng)?;
    reports.push(check_submodularity(&predict_set_function_over_powerset(&max_model, &ground)?, c.subset_tol)?);

    for agg in suite_aggregators(&mut rng) {
        let model = small_model(d, 3, 2, &agg, false, &mut rng)?;
        let batch = SetBatch::unlabeled(&random_sets(&mut rng, 5, c.max_set_size, d))?;
        let mut r = grad_check(&model, &batch, c.grad_h, c.grad_tol)?;
        r.name = match agg {
            AggregatorSpec::PowerMean { learnable: true, .. } => "grad_check[power_mean learnable]".into(),
            AggregatorSpec::PowerMean { p, .. } => format!("grad_check[power_mean p={p:.3}]"),
            _ => format!("grad_check[{}]", agg.name()),
        };
        reports.push(r);
    }

    for g in [MonotoneMap::Identity, MonotoneMap::Ln, MonotoneMap::Exp, MonotoneMap::Power { q: 2.0 }] {
        let sets: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..1 + rng.below(8)).map(|_| rng.uniform_range(0.1, 3.0)).collect())
            .collect();
        let mut r = check_sum_isomorphism(g, &sets, c.isomorphism_tol)?;
        r.name = match g {
            MonotoneMap::Identity => "sum_isomorphism[identity]".into(),
            MonotoneMap::Ln => "sum_isomorphism[ln]".into(),
            MonotoneMap::Exp => "sum_isomorphism[exp]".into(),
            MonotoneMap::Power { q } => format!("sum_isomorphism[power q={q}]"),
        };
        reports.push(r);
    }
    Ok(reports)
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Names and checksums of every artifact a command wrote.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub command: String,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes each file into `dir` (via a temporary name and a rename, so a
/// file is either complete or absent), then `manifest.json` listing them in
/// name order.
pub fn write_artifacts(dir: &Path, command: &str, files: &[(String, Vec<u8>)]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        write_atomic(&dir.join(name), bytes)?;
        entries.push(ManifestEntry {
            name: name.clone(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
    }
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        command: command.to_string(),
        files: entries,
    };
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    write_atomic(&dir.join(MANIFEST_NAME), &text)?;
    Ok(manifest)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_checksums_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        let files = vec![("b.txt".to_string(), b"beta".to_vec()), ("a.txt".to_string(), b"".to_vec())];
        let m = write_artifacts(dir.path(), "test", &files).unwrap();
        assert_eq!(m.files[0].name, "a.txt");
        assert_eq!(m.files[0].sha256, "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(fs::read(dir.path().join("b.txt")).unwrap(), b"beta");
        assert!(dir.path().join(MANIFEST_NAME).exists());
    }

    #[test]
    fn overrides_create_and_replace() {
        let defaults = serde_json::to_value(ExperimentConfig::default()).unwrap();
        let mut v = serde_json::json!({"train": {"epochs": 5}});
        apply_override(&mut v, &defaults, "train.epochs", "7").unwrap();
        apply_override(&mut v, &defaults, "task.dist", "gamma").unwrap();
        assert_eq!(v["train"]["epochs"], 7);
        assert_eq!(v["task"]["dist"], "gamma");
        assert_eq!(v["task"]["kind"], "median");
        assert!(apply_override(&mut v, &defaults, "train.epochs.x", "1").is_err());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let file = r#"{"seed": 4, "train": {"epochs": 9}}"#;
        let cfg = ExperimentConfig::from_json(Some(file), &[("seed".into(), "11".into())]).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn positive_embeddings_follow_aggregator() {
        let mut m = ModelConfig::default();
        assert!(!m.phi_spec().positive_output);
        m.aggregator = AggregatorSpec::power_mean(3.0);
        assert!(m.phi_spec().positive_output);
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let e = ExperimentConfig::from_json(Some(r#"{"model": {"rho": [8, 1]}}"#), &[]);
        assert!(matches!(e, Err(Error::Config(_))));
        let e = ExperimentConfig::from_json(Some(r#"{"task": {"kind": "median", "dist": "cauchy"}}"#), &[]);
        assert!(e.unwrap_err().to_string().contains("dist"));
    }

    #[test]
    fn default_suite_passes_and_injection_fails() {
        let mut cfg = ExperimentConfig::default();
        cfg.check.n_models = 8;
        let reports = run_checks(&cfg, false).unwrap();
        for r in &reports {
            assert!(r.passed, "{r:?}");
        }
        let bad = run_checks(&cfg, true).unwrap();
        assert!(!bad[0].passed && bad[0].witness.is_some());
        assert_eq!(bad.len(), reports.len());
    }
}
