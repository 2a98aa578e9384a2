//! Synthetic set tasks, their NDJSON storage, and train/val/test splits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution as _, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::setnn::{SetBatch, Targets};
use crate::FORMAT_VERSION;

/// Offset added to Gaussian draws so elements are positive with
/// overwhelming probability (P(N(0,1) < −5) ≈ 3e-7).
pub const GAUSSIAN_SHIFT: f64 = 5.0;
pub const GAMMA_SHAPE: f64 = 2.0;
pub const GAMMA_SCALE: f64 = 1.0;

/// Element distribution for the scalar tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Distribution {
    /// Uniform on `(0, 1)`.
    #[default]
    Uniform,
    /// `N(0, 1)` shifted by [`GAUSSIAN_SHIFT`].
    Gaussian,
    /// Gamma with shape [`GAMMA_SHAPE`] and scale [`GAMMA_SCALE`].
    Gamma,
}

impl TryFrom<String> for Distribution {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.as_str() {
            "uniform" => Ok(Distribution::Uniform),
            "gaussian" => Ok(Distribution::Gaussian),
            "gamma" => Ok(Distribution::Gamma),
            other => Err(format!(
                "invalid value `{other}` for field `dist`: expected uniform, gaussian or gamma"
            )),
        }
    }
}

impl From<Distribution> for String {
    fn from(d: Distribution) -> String {
        match d {
            Distribution::Uniform => "uniform",
            Distribution::Gaussian => "gaussian",
            Distribution::Gamma => "gamma",
        }
        .to_string()
    }
}

impl Distribution {
    pub fn sample(self, rng: &mut Rng) -> f64 {
        match self {
            Distribution::Uniform => loop {
                // open interval keeps every element strictly positive
                let u = rng.uniform();
                if u > 0.0 {
                    break u;
                }
            },
            Distribution::Gaussian => rng.normal() + GAUSSIAN_SHIFT,
            Distribution::Gamma => Gamma::new(GAMMA_SHAPE, GAMMA_SCALE)
                .expect("valid parameters")
                .sample(rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere,
    Cube,
    Plane,
}

impl Shape {
    /// A point on the unit sphere, the surface of `[-1, 1]³`, or the square
    /// `[-1, 1]² × {0}`.
    fn sample_surface(self, rng: &mut Rng) -> [f64; 3] {
        match self {
            Shape::Sphere => loop {
                let v = [rng.normal(), rng.normal(), rng.normal()];
                let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if r > 1e-12 {
                    break v.map(|x| x / r);
                }
            },
            Shape::Cube => {
                let face = rng.below(6);
                let mut v = [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0), 0.0];
                v[2] = if face % 2 == 0 { 1.0 } else { -1.0 };
                v.rotate_right(face / 2);
                v
            }
            Shape::Plane => [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0), 0.0],
        }
    }
}

fn all_shapes() -> Vec<Shape> {
    vec![Shape::Sphere, Shape::Cube, Shape::Plane]
}

/// What is predicted from a set. Scalar targets read coordinate 0 of each
/// element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Lower median.
    Median {
        #[serde(default)]
        dist: Distribution,
    },
    MaxOfSet {
        #[serde(default)]
        dist: Distribution,
    },
    SumOfSet {
        #[serde(default)]
        dist: Distribution,
    },
    MeanOfSet {
        #[serde(default)]
        dist: Distribution,
    },
    /// `max − min`.
    Range {
        #[serde(default)]
        dist: Distribution,
    },
    Cardinality {
        #[serde(default)]
        dist: Distribution,
    },
    /// Noisy samples from a class surface in 3-D; the label is the index of
    /// the class in `classes`. Clouds always hold `points_per_cloud` points.
    ToyPointCloud {
        #[serde(default = "all_shapes")]
        classes: Vec<Shape>,
        points_per_cloud: usize,
        #[serde(default)]
        noise_sigma: f64,
    },
}

/// Fixed set size or an inclusive range `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SetSize {
    Fixed(usize),
    Range([usize; 2]),
}

impl SetSize {
    fn bounds(self) -> (usize, usize) {
        match self {
            SetSize::Fixed(m) => (m, m),
            SetSize::Range([lo, hi]) => (lo, hi),
        }
    }
}

fn default_set_size() -> SetSize {
    SetSize::Fixed(16)
}

fn default_dim() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub kind: TaskKind,
    #[serde(default = "default_set_size")]
    pub set_size: SetSize,
    #[serde(default = "default_dim")]
    pub d: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, set_size: SetSize, d: usize) -> Self {
        TaskSpec { kind, set_size, d }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("task.d must be at least 1"));
        }
        match &self.kind {
            TaskKind::ToyPointCloud {
                classes,
                points_per_cloud,
                noise_sigma,
            } => {
                if self.d != 3 {
                    return Err(Error::config("point clouds need task.d = 3"));
                }
                if classes.is_empty() || *points_per_cloud == 0 {
                    return Err(Error::config("point clouds need classes and points_per_cloud ≥ 1"));
                }
                if !(*noise_sigma >= 0.0) || !noise_sigma.is_finite() {
                    return Err(Error::config("task.noise_sigma must be finite and ≥ 0"));
                }
            }
            _ => {
                let (lo, hi) = self.set_size.bounds();
                if lo == 0 || hi < lo {
                    return Err(Error::config(format!(
                        "task.set_size must satisfy 1 ≤ lo ≤ hi, got [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.kind, TaskKind::ToyPointCloud { .. })
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.kind {
            TaskKind::ToyPointCloud { classes, .. } => Some(classes.len()),
            _ => None,
        }
    }

    /// Whether every element coordinate is strictly positive, as power means
    /// over raw elements require.
    pub fn power_mean_compatible(&self) -> bool {
        !self.is_classification()
    }

    /// Target recomputed from the elements; `None` for classification.
    pub fn target_of(&self, set: &Matrix) -> Option<f64> {
        let mut x = set.col_values(0);
        let n = x.len();
        Some(match self.kind {
            TaskKind::Median { .. } => {
                x.sort_by(f64::total_cmp);
                x[(n - 1) / 2]
            }
            TaskKind::MaxOfSet { .. } => x.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            TaskKind::SumOfSet { .. } => x.iter().sum(),
            TaskKind::MeanOfSet { .. } => x.iter().sum::<f64>() / n as f64,
            TaskKind::Range { .. } => {
                let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let min = x.iter().copied().fold(f64::INFINITY, f64::min);
                max - min
            }
            TaskKind::Cardinality { .. } => n as f64,
            TaskKind::ToyPointCloud { .. } => return None,
        })
    }

    fn sample_set(&self, rng: &mut Rng) -> (Matrix, Target) {
        match &self.kind {
            TaskKind::ToyPointCloud {
                classes,
                points_per_cloud,
                noise_sigma,
            } => {
                let label = rng.below(classes.len());
                let mut data = Vec::with_capacity(points_per_cloud * 3);
                for _ in 0..*points_per_cloud {
                    let p = classes[label].sample_surface(rng);
                    data.extend(p.iter().map(|c| c + noise_sigma * rng.normal()));
                }
                (Matrix::new(*points_per_cloud, 3, data).expect("sized"), Target::Label(label))
            }
            TaskKind::Median { dist }
            | TaskKind::MaxOfSet { dist }
            | TaskKind::SumOfSet { dist }
            | TaskKind::MeanOfSet { dist }
            | TaskKind::Range { dist }
            | TaskKind::Cardinality { dist } => {
                let (lo, hi) = self.set_size.bounds();
                let n = lo + rng.below(hi - lo + 1);
                let data = (0..n * self.d).map(|_| dist.sample(rng)).collect();
                let set = Matrix::new(n, self.d, data).expect("sized");
                let y = self.target_of(&set).expect("scalar task");
                (set, Target::Value(y))
            }
        }
    }
}

enum Target {
    Value(f64),
    Label(usize),
}

/// Generated or loaded sets with their task metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub seed: u64,
    pub batch: SetBatch,
    /// Index of each set in the originally generated sequence.
    pub set_ids: Vec<usize>,
}

/// Draws `n_sets` i.i.d. sets. Set `i` uses the stream `rng.fork(i)`, so the
/// result depends only on `(spec, rng.seed())`.
pub fn generate(spec: &TaskSpec, n_sets: usize, rng: &Rng) -> Result<Dataset> {
    spec.validate()?;
    if n_sets == 0 {
        return Err(Error::config("n_sets must be at least 1"));
    }
    let drawn: Vec<(Matrix, Target)> = (0..n_sets)
        .into_par_iter()
        .map(|i| spec.sample_set(&mut rng.fork(i as u64)))
        .collect();
    let targets = if spec.is_classification() {
        Targets::Labels(
            drawn
                .iter()
                .map(|(_, t)| match t {
                    Target::Label(l) => *l,
                    Target::Value(_) => unreachable!("classification task"),
                })
                .collect(),
        )
    } else {
        Targets::Values(
            drawn
                .iter()
                .map(|(_, t)| match t {
                    Target::Value(v) => *v,
                    Target::Label(_) => unreachable!("regression task"),
                })
                .collect(),
        )
    };
    let sets: Vec<Matrix> = drawn.into_iter().map(|(s, _)| s).collect();
    Ok(Dataset {
        spec: spec.clone(),
        seed: rng.seed(),
        batch: SetBatch::from_sets(&sets, targets)?,
        set_ids: (0..n_sets).collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    task: TaskSpec,
    d: usize,
    seed: u64,
    n_sets: usize,
    generator: Value,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: usize,
    x: Vec<Vec<f64>>,
    y: Value,
}

fn generator_metadata() -> Value {
    json!({
        "gaussian_shift": GAUSSIAN_SHIFT,
        "gamma_shape": GAMMA_SHAPE,
        "gamma_scale": GAMMA_SCALE,
        "median": "lower",
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    /// Sub-dataset with the given positions, in order.
    pub fn select(&self, positions: &[usize]) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            seed: self.seed,
            batch: self.batch.select(positions),
            set_ids: positions.iter().map(|&i| self.set_ids[i]).collect(),
        }
    }

    /// NDJSON: one header line, then one line per set.
    pub fn write_ndjson(&self, out: &mut impl Write) -> Result<()> {
        let header = Header {
            format_version: FORMAT_VERSION,
            task: self.spec.clone(),
            d: self.batch.dim(),
            seed: self.seed,
            n_sets: self.len(),
            generator: generator_metadata(),
        };
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n")?;
        for i in 0..self.len() {
            let set = self.batch.set(i);
            let y = match self.batch.targets() {
                Targets::Values(v) => json!(v[i]),
                Targets::Labels(l) => json!(l[i]),
                Targets::None => Value::Null,
            };
            let rec = Record {
                id: self.set_ids[i],
                x: set.iter_rows().map(<[f64]>::to_vec).collect(),
                y,
            };
            serde_json::to_writer(&mut *out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_ndjson(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_ndjson(input: impl BufRead) -> Result<Dataset> {
        let mut lines = input.lines();
        let parse_err = |line: usize, msg: String| Error::Parse { line, msg };
        let header: Header = match lines.next() {
            None => return Err(parse_err(1, "missing header".into())),
            Some(l) => serde_json::from_str(&l?).map_err(|e| parse_err(1, e.to_string()))?,
        };
        if header.format_version != FORMAT_VERSION {
            return Err(parse_err(1, format!("unsupported format_version {}", header.format_version)));
        }
        header.task.validate()?;
        let mut sets = Vec::new();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
            let n = rec.x.len();
            if n == 0 {
                return Err(parse_err(lineno, "set is empty".into()));
            }
            if rec.x.iter().any(|r| r.len() != header.d) {
                return Err(parse_err(lineno, format!("element dimension differs from d = {}", header.d)));
            }
            sets.push(Matrix::new(n, header.d, rec.x.concat())?);
            ids.push(rec.id);
            if header.task.is_classification() {
                labels.push(
                    rec.y
                        .as_u64()
                        .ok_or_else(|| parse_err(lineno, "label must be a non-negative integer".into()))?
                        as usize,
                );
            } else {
                values.push(rec.y.as_f64().ok_or_else(|| parse_err(lineno, "target must be a number".into()))?);
            }
        }
        if sets.is_empty() {
            return Err(Error::Validation("dataset has no sets".into()));
        }
        if sets.len() != header.n_sets {
            return Err(parse_err(
                sets.len() + 2,
                format!("header declares {} sets, found {}", header.n_sets, sets.len()),
            ));
        }
        let targets = if header.task.is_classification() {
            Targets::Labels(labels)
        } else {
            Targets::Values(values)
        };
        Ok(Dataset {
            spec: header.task,
            seed: header.seed,
            batch: SetBatch::from_sets(&sets, targets)?,
            set_ids: ids,
        })
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::read_ndjson(BufReader::new(File::open(path)?))
    }

    /// Per-set summary of coordinate 0: `id,size,mean,min,max,target`.
    pub fn write_stats_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "size", "mean", "min", "max", "target"])?;
        for i in 0..self.len() {
            let x = self.batch.set(i).col_values(0);
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let min = x.iter().copied().fold(f64::INFINITY, f64::min);
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let target = match self.batch.targets() {
                Targets::Values(v) => v[i].to_string(),
                Targets::Labels(l) => l[i].to_string(),
                Targets::None => String::new(),
            };
            w.write_record([
                self.set_ids[i].to_string(),
                x.len().to_string(),
                mean.to_string(),
                min.to_string(),
                max.to_string(),
                target,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shuffles with `rng` and cuts into train/val/test. Train and validation
/// sizes are rounded; test takes the remainder.
pub fn split(dataset: &Dataset, fractions: [f64; 3], rng: &mut Rng) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
        return Err(Error::Validation(format!("split fractions must be positive, got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("split fractions sum to {total}, not 1")));
    }
    let n = dataset.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Validation(format!(
            "{n} sets are too few for split {fractions:?}: every part needs at least one set"
        )));
    }
    let perm = rng.permutation(n);
    Ok((
        dataset.select(&perm[..n_train]),
        dataset.select(&perm[n_train..n_train + n_val]),
        dataset.select(&perm[n_train + n_val..]),
    ))
}
