use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Per-set supervision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    Values(Vec<f64>),
    Labels(Vec<usize>),
    None,
}

impl Targets {
    fn len(&self) -> Option<usize> {
        match self {
            Targets::Values(v) => Some(v.len()),
            Targets::Labels(v) => Some(v.len()),
            Targets::None => None,
        }
    }

    fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Values(v) => Targets::Values(indices.iter().map(|&i| v[i]).collect()),
            Targets::Labels(v) => Targets::Labels(indices.iter().map(|&i| v[i]).collect()),
            Targets::None => Targets::None,
        }
    }
}

/// Variable-size sets packed row-wise: set `i` occupies rows
/// `offsets[i]..offsets[i + 1]` (the last set runs to the end).
#[derive(Clone, Debug, PartialEq)]
pub struct SetBatch {
    elements: Matrix,
    offsets: Vec<usize>,
    targets: Targets,
}

impl SetBatch {
    pub fn new(elements: Matrix, offsets: Vec<usize>, targets: Targets) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::domain("a batch needs at least one set"));
        }
        if offsets[0] != 0 {
            return Err(Error::Validation("first offset must be 0".into()));
        }
        for (i, w) in offsets.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::domain(format!("set {i} is empty (offsets must strictly increase)")));
            }
        }
        if *offsets.last().unwrap() >= elements.rows() {
            return Err(Error::domain(format!("set {} is empty", offsets.len() - 1)));
        }
        if let Some(n) = targets.len() {
            if n != offsets.len() {
                return Err(Error::Validation(format!(
                    "{} targets for {} sets",
                    n,
                    offsets.len()
                )));
            }
        }
        Ok(SetBatch {
            elements,
            offsets,
            targets,
        })
    }

    /// Packs a list of sets (each a matrix of element rows).
    pub fn from_sets(sets: &[Matrix], targets: Targets) -> Result<Self> {
        let Some(first) = sets.first() else {
            return Err(Error::domain("a batch needs at least one set"));
        };
        let d = first.cols();
        let mut data = Vec::new();
        let mut offsets = Vec::with_capacity(sets.len());
        let mut rows = 0;
        for (i, s) in sets.iter().enumerate() {
            if s.cols() != d {
                return Err(Error::Shape {
                    op: "SetBatch::from_sets",
                    left: (i, s.cols()),
                    right: (0, d),
                });
            }
            if s.rows() == 0 {
                return Err(Error::domain(format!("set {i} is empty")));
            }
            offsets.push(rows);
            rows += s.rows();
            data.extend_from_slice(s.data());
        }
        SetBatch::new(Matrix::new(rows, d, data)?, offsets, targets)
    }

    pub fn unlabeled(sets: &[Matrix]) -> Result<Self> {
        SetBatch::from_sets(sets, Targets::None)
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.elements.cols()
    }

    pub fn elements(&self) -> &Matrix {
        &self.elements
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn set_range(&self, i: usize) -> Range<usize> {
        let end = self
            .offsets
            .get(i + 1)
            .copied()
            .unwrap_or(self.elements.rows());
        self.offsets[i]..end
    }

    pub fn set_size(&self, i: usize) -> usize {
        self.set_range(i).len()
    }

    pub fn set(&self, i: usize) -> Matrix {
        let r = self.set_range(i);
        self.elements.row_block(r.start, r.end)
    }

    pub fn sets(&self) -> Vec<Matrix> {
        (0..self.len()).map(|i| self.set(i)).collect()
    }

    /// Sub-batch with the given sets, in order.
    pub fn select(&self, indices: &[usize]) -> SetBatch {
        let rows: Vec<usize> = indices.iter().flat_map(|&i| self.set_range(i)).collect();
        let mut offsets = Vec::with_capacity(indices.len());
        let mut acc = 0;
        for &i in indices {
            offsets.push(acc);
            acc += self.set_size(i);
        }
        SetBatch {
            elements: self.elements.select_rows(&rows),
            offsets,
            targets: self.targets.select(indices),
        }
    }
}
