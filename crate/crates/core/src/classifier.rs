//! Cosine classifier over concatenated prototype matrices.

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, row_l2_normalize, Matrix};
use crate::prototype::{PrototypeMatrix, PrototypeStore, SubspaceTag};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierWeights {
    /// Raw prototype rows, ordered by `(task_id, class_id)`.
    weights: Matrix,
    /// Row-normalized copy used for scoring.
    unit_rows: Matrix,
    class_ids: Vec<usize>,
}

impl ClassifierWeights {
    /// Concatenates prototype matrices in the order given.
    pub fn from_prototypes(parts: &[&PrototypeMatrix]) -> Result<Self> {
        let dim = parts
            .first()
            .map(|p| p.dim())
            .ok_or_else(|| Error::IncompleteStore("no prototypes to build a classifier from".into()))?;
        let mut data = Vec::new();
        let mut class_ids = Vec::new();
        for p in parts {
            if p.dim() != dim {
                return Err(Error::shape("prototype dims differ across tasks"));
            }
            data.extend_from_slice(p.rows.data());
            class_ids.extend_from_slice(&p.class_ids);
        }
        let weights = Matrix::from_vec(class_ids.len(), dim, data)?;
        ClassifierWeights::new(weights, class_ids)
    }

    pub fn new(weights: Matrix, class_ids: Vec<usize>) -> Result<Self> {
        if weights.rows() != class_ids.len() {
            return Err(Error::shape("one class id per classifier row"));
        }
        let unit_rows = row_l2_normalize(&weights)?;
        Ok(ClassifierWeights {
            weights,
            unit_rows,
            class_ids,
        })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Cosine logits and the argmax class (lowest class id on ties).
    pub fn predict(&self, feature: &[f64]) -> Result<(usize, Vec<f64>)> {
        if feature.len() != self.dim() {
            return Err(Error::shape(format!(
                "feature dim {} != classifier dim {}",
                feature.len(),
                self.dim()
            )));
        }
        let norm = l2_norm(feature);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateVector("query feature has zero norm".into()));
        }
        let logits: Vec<f64> = self
            .unit_rows
            .row_iter()
            .map(|w| (dot(w, feature) / norm).clamp(-1.0, 1.0))
            .collect();
        let mut best = 0;
        for k in 1..logits.len() {
            let better = logits[k] > logits[best]
                || (logits[k] == logits[best] && self.class_ids[k] < self.class_ids[best]);
            if better {
                best = k;
            }
        }
        Ok((self.class_ids[best], logits))
    }

    pub fn predict_class(&self, feature: &[f64]) -> Result<usize> {
        self.predict(feature).map(|(c, _)| c)
    }
}

/// Assembles the classifier for tasks `task_ids` in subspace `current`.
///
/// With `allow_stale`, a task without prototypes in `current` falls back to
/// its raw prototypes from its own subspace (the unmapped substitute).
pub fn build_classifier(
    store: &PrototypeStore,
    task_ids: &[usize],
    current: SubspaceTag,
    allow_stale: bool,
) -> Result<ClassifierWeights> {
    let mut ordered = task_ids.to_vec();
    ordered.sort_unstable();
    let parts = ordered
        .iter()
        .map(|&t| {
            store
                .get(t, current)
                .or_else(|| if allow_stale { store.raw(t) } else { None })
                .ok_or_else(|| {
                    Error::IncompleteStore(format!("no prototypes for task {t} in subspace {current}"))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    ClassifierWeights::from_prototypes(&parts)
}
