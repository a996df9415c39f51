//! Task streams: synthetic generation, splits and the exemplar-free guard.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

/// One task's data. `task_id` is 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: usize,
    /// Global class ids, ascending.
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    /// Optional held-out split for prototype estimation.
    #[serde(default)]
    pub val: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Eval => &self.eval,
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        for (name, split) in [("train", &self.train), ("eval", &self.eval)] {
            for &c in &self.classes {
                if !split.iter().any(|s| s.y == c) {
                    return Err(Error::Data(format!(
                        "task {} class {c} has no {name} samples",
                        self.task_id
                    )));
                }
            }
        }
        for s in self.train.iter().chain(&self.val).chain(&self.eval) {
            if self.classes.binary_search(&s.y).is_err() {
                return Err(Error::Data(format!(
                    "task {} sample labelled {} outside its class set",
                    self.task_id, s.y
                )));
            }
            if s.x.len() != input_dim {
                return Err(Error::shape(format!(
                    "task {} sample has dim {}, stream dim is {input_dim}",
                    self.task_id,
                    s.x.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Eval,
}

/// Where prototypes are estimated from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSource {
    #[default]
    Train,
    /// The held-out `val` split.
    Validation,
}

impl PrototypeSource {
    pub fn split(self) -> Split {
        match self {
            PrototypeSource::Train => Split::Train,
            PrototypeSource::Validation => Split::Val,
        }
    }
}

impl FromStr for PrototypeSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(PrototypeSource::Train),
            "validation" | "val" => Ok(PrototypeSource::Validation),
            _ => Err(Error::Config(format!("unknown prototype source `{s}`"))),
        }
    }
}

impl fmt::Display for PrototypeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrototypeSource::Train => "train",
            PrototypeSource::Validation => "validation",
        })
    }
}

/// Per-task transform applied cumulatively: task `t` gets `t - 1` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftModel {
    None,
    /// Rotation by `angle` radians per task in a seeded random 2-plane.
    Rotation { angle: f64 },
    /// Translation by `magnitude` per task along a seeded unit direction.
    Offset { magnitude: f64 },
    /// Rotation by `angle` radians per task in a freshly drawn random
    /// 2-plane each step, so the per-step drift direction is noisy.
    RandomRotation { angle: f64 },
}

impl Default for DriftModel {
    fn default() -> Self {
        DriftModel::None
    }
}

impl fmt::Display for DriftModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriftModel::None => write!(f, "none"),
            DriftModel::Rotation { angle } => write!(f, "rotation:{angle}"),
            DriftModel::Offset { magnitude } => write!(f, "offset:{magnitude}"),
            DriftModel::RandomRotation { angle } => write!(f, "random_rotation:{angle}"),
        }
    }
}

impl FromStr for DriftModel {
    type Err = Error;
    /// `none`, `rotation:<radians>`, `offset:<magnitude>` or
    /// `random_rotation:<radians>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid drift model `{s}`"));
        let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
        let value = || arg.ok_or_else(bad)?.parse::<f64>().map_err(|_| bad());
        match kind {
            "none" if arg.is_none() => Ok(DriftModel::None),
            "rotation" => Ok(DriftModel::Rotation { angle: value()? }),
            "offset" => Ok(DriftModel::Offset { magnitude: value()? }),
            "random_rotation" => Ok(DriftModel::RandomRotation { angle: value()? }),
            _ => Err(bad()),
        }
    }
}

/// Synthetic stream in `B-m Inc-n` notation. `base_classes = 0` means the
/// first task has `inc_classes` classes like every other.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub n_tasks: usize,
    pub base_classes: usize,
    pub inc_classes: usize,
    pub train_per_class: usize,
    #[serde(default)]
    pub val_per_class: usize,
    pub eval_per_class: usize,
    pub input_dim: usize,
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    /// Dimension of the seeded subspace holding the class means; 0 means
    /// the whole input space.
    #[serde(default)]
    pub signal_dim: usize,
    /// Extra noise confined to the complement of the signal subspace.
    #[serde(default)]
    pub nuisance_sigma: f64,
    /// Norm of a seeded mean vector shared by every sample (embeddings
    /// rarely center on the origin).
    #[serde(default)]
    pub center_offset: f64,
    pub drift: DriftModel,
    pub seed: u64,
}

impl StreamSpec {
    pub fn first_task_classes(&self) -> usize {
        if self.base_classes == 0 {
            self.inc_classes
        } else {
            self.base_classes
        }
    }

    pub fn total_classes(&self) -> usize {
        self.first_task_classes() + self.n_tasks.saturating_sub(1) * self.inc_classes
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.n_tasks == 0 {
            return fail("n_tasks must be >= 1");
        }
        if self.first_task_classes() == 0 {
            return fail("the first task needs at least one class");
        }
        if self.n_tasks > 1 && self.inc_classes == 0 {
            return fail("inc_classes must be >= 1 when n_tasks > 1");
        }
        if self.train_per_class == 0 || self.eval_per_class == 0 {
            return fail("train_per_class and eval_per_class must be >= 1");
        }
        if self.input_dim == 0 {
            return fail("input_dim must be >= 1");
        }
        if !(self.cluster_separation.is_finite() && self.cluster_separation >= 0.0) {
            return fail("cluster_separation must be finite and >= 0");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be finite and >= 0");
        }
        if self.signal_dim > self.input_dim {
            return fail("signal_dim must not exceed input_dim");
        }
        if !(self.nuisance_sigma.is_finite() && self.nuisance_sigma >= 0.0) {
            return fail("nuisance_sigma must be finite and >= 0");
        }
        if !self.center_offset.is_finite() {
            return fail("center_offset must be finite");
        }
        match self.drift {
            DriftModel::Rotation { .. } | DriftModel::RandomRotation { .. } if self.input_dim < 2 => {
                fail("rotation drift needs input_dim >= 2")
            }
            DriftModel::Rotation { angle: v }
            | DriftModel::Offset { magnitude: v }
            | DriftModel::RandomRotation { angle: v }
                if !v.is_finite() =>
            {
                fail("drift parameter must be finite")
            }
            _ => Ok(()),
        }
    }
}

/// Task boundaries over a sorted class list.
pub fn partition_classes(n_classes: usize, base: usize, inc: usize) -> Result<Vec<std::ops::Range<usize>>> {
    let first = if base == 0 { inc } else { base };
    if first == 0 || first > n_classes {
        return Err(Error::Config(format!(
            "cannot form a first task of {first} classes from {n_classes}"
        )));
    }
    let rest = n_classes - first;
    if rest > 0 && (inc == 0 || rest % inc != 0) {
        return Err(Error::Config(format!(
            "{n_classes} classes do not split as B-{first} Inc-{inc}"
        )));
    }
    let mut ranges = vec![0..first];
    let mut start = first;
    while start < n_classes {
        ranges.push(start..start + inc);
        start += inc;
    }
    Ok(ranges)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub input_dim: usize,
    pub tasks: Vec<TaskDataset>,
}

impl TaskStream {
    pub fn new(input_dim: usize, tasks: Vec<TaskDataset>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Data("stream has no tasks".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (k, t) in tasks.iter().enumerate() {
            if t.task_id != k + 1 {
                return Err(Error::Data(format!("task ids must be 1..T, found {} at {k}", t.task_id)));
            }
            for &c in &t.classes {
                if !seen.insert(c) {
                    return Err(Error::Data(format!("class {c} appears in more than one task")));
                }
            }
            t.validate(input_dim)?;
        }
        Ok(TaskStream { input_dim, tasks })
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// 1-based access.
    pub fn task(&self, t: usize) -> &TaskDataset {
        &self.tasks[t - 1]
    }

    pub fn n_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.classes.len()).sum()
    }

    /// Every sample in task order, train then val then eval.
    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.val).chain(&t.eval))
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let norm = l2_norm(&v);
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Orthonormal pair by Gram-Schmidt.
fn unit_plane(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let u = unit_vec(rng, n);
    loop {
        let mut w = gaussian_vec(rng, n);
        let p = dot(&w, &u);
        for (wi, ui) in w.iter_mut().zip(&u) {
            *wi -= p * ui;
        }
        let norm = l2_norm(&w);
        if norm > 1e-9 {
            return (u, w.into_iter().map(|x| x / norm).collect());
        }
    }
}

/// `n` orthonormal vectors of length `dim` by Gram-Schmidt.
fn orthonormal_basis(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = gaussian_vec(rng, dim);
        for b in &basis {
            let p = dot(&v, b);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= p * bi;
            }
        }
        let norm = l2_norm(&v);
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

struct Drift {
    model: DriftModel,
    u: Vec<f64>,
    w: Vec<f64>,
    /// Per-step planes for `RandomRotation`, one per task after the first.
    planes: Vec<(Vec<f64>, Vec<f64>)>,
}

fn rotate_in_plane(x: &mut [f64], u: &[f64], w: &[f64], angle: f64) {
    let (a, b) = (dot(x, u), dot(x, w));
    let (s, c) = angle.sin_cos();
    let (a2, b2) = (c * a - s * b, s * a + c * b);
    for ((xi, ui), wi) in x.iter_mut().zip(u).zip(w) {
        *xi += (a2 - a) * ui + (b2 - b) * wi;
    }
}

impl Drift {
    fn apply(&self, x: &mut [f64], steps: usize) {
        let k = steps as f64;
        match self.model {
            DriftModel::None => {}
            DriftModel::Offset { magnitude } => {
                for (xi, ui) in x.iter_mut().zip(&self.u) {
                    *xi += k * magnitude * ui;
                }
            }
            DriftModel::Rotation { angle } => rotate_in_plane(x, &self.u, &self.w, k * angle),
            DriftModel::RandomRotation { angle } => {
                for (u, w) in &self.planes[..steps] {
                    rotate_in_plane(x, u, w, angle);
                }
            }
        }
    }
}

/// Seeded Gaussian clusters, one per class, with means on a sphere of radius
/// `cluster_separation` (inside the signal subspace when `signal_dim > 0`).
/// Class ids run `0..C` in task order.
pub fn generate_synthetic_stream(spec: &StreamSpec) -> Result<TaskStream> {
    spec.validate()?;
    let dim = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (u, w) = if dim >= 2 {
        unit_plane(&mut rng, dim)
    } else {
        (unit_vec(&mut rng, dim), vec![0.0; dim])
    };
    let planes = match spec.drift {
        // Separate stream so the other draws match the fixed-plane models.
        DriftModel::RandomRotation { .. } => {
            let mut prng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_d1f7);
            (1..spec.n_tasks).map(|_| unit_plane(&mut prng, dim)).collect()
        }
        _ => Vec::new(),
    };
    let drift = Drift { model: spec.drift, u, w, planes };
    let center: Vec<f64> = if spec.center_offset != 0.0 {
        unit_vec(&mut rng, dim).into_iter().map(|v| v * spec.center_offset).collect()
    } else {
        vec![0.0; dim]
    };
    let structured = spec.signal_dim > 0 && spec.signal_dim < dim;
    let (signal, nuisance) = if structured {
        let mut basis = orthonormal_basis(&mut rng, dim, dim);
        let nuisance = basis.split_off(spec.signal_dim);
        (basis, nuisance)
    } else {
        (Vec::new(), Vec::new())
    };
    let ranges = partition_classes(spec.total_classes(), spec.base_classes, spec.inc_classes)?;

    let mut tasks = Vec::with_capacity(ranges.len());
    for (k, range) in ranges.into_iter().enumerate() {
        let mut task = TaskDataset {
            task_id: k + 1,
            classes: range.clone().collect(),
            train: Vec::new(),
            val: Vec::new(),
            eval: Vec::new(),
        };
        for class in range {
            let mean: Vec<f64> = if structured {
                let coef = unit_vec(&mut rng, signal.len());
                let mut m = vec![0.0; dim];
                for (c, b) in coef.iter().zip(&signal) {
                    for (mi, bi) in m.iter_mut().zip(b) {
                        *mi += spec.cluster_separation * c * bi;
                    }
                }
                m
            } else {
                unit_vec(&mut rng, dim)
                    .into_iter()
                    .map(|v| v * spec.cluster_separation)
                    .collect()
            };
            let mut draw = |n: usize, out: &mut Vec<Sample>| {
                for _ in 0..n {
                    let mut x: Vec<f64> = mean
                        .iter()
                        .map(|m| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            m + spec.noise_sigma * z
                        })
                        .collect();
                    if spec.nuisance_sigma > 0.0 {
                        for b in &nuisance {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            for (xi, bi) in x.iter_mut().zip(b) {
                                *xi += spec.nuisance_sigma * z * bi;
                            }
                        }
                    }
                    for (xi, ci) in x.iter_mut().zip(&center) {
                        *xi += ci;
                    }
                    drift.apply(&mut x, k);
                    out.push(Sample { x, y: class });
                }
            };
            draw(spec.train_per_class, &mut task.train);
            draw(spec.val_per_class, &mut task.val);
            draw(spec.eval_per_class, &mut task.eval);
        }
        tasks.push(task);
    }
    TaskStream::new(dim, tasks)
}

/// How a flat labelled sample file is cut into tasks and splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base_classes: usize,
    pub inc_classes: usize,
    /// Fraction of each class held out for evaluation (at least one sample
    /// each side).
    pub eval_fraction: f64,
    #[serde(default)]
    pub val_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| f.is_finite() && (0.0..1.0).contains(&f);
        if !ok(self.eval_fraction) || !ok(self.val_fraction) || self.eval_fraction + self.val_fraction >= 1.0 {
            return Err(Error::Config("split fractions must lie in [0, 1) and sum below 1".into()));
        }
        Ok(())
    }
}

/// Builds a stream from `(class_id, x)` rows.
pub fn stream_from_rows(rows: Vec<(usize, Vec<f64>)>, dim: usize, split: &SplitSpec) -> Result<TaskStream> {
    split.validate()?;
    let mut by_class: std::collections::BTreeMap<usize, Vec<Vec<f64>>> = Default::default();
    for (c, x) in rows {
        by_class.entry(c).or_default().push(x);
    }
    if let Some((c, v)) = by_class.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::Data(format!(
            "class {c} has {} sample(s); at least 2 are needed for a train/eval split",
            v.len()
        )));
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let ranges = partition_classes(classes.len(), split.base_classes, split.inc_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
    let mut tasks = Vec::with_capacity(ranges.len());
    for (k, range) in ranges.into_iter().enumerate() {
        let mut task = TaskDataset {
            task_id: k + 1,
            classes: classes[range.clone()].to_vec(),
            train: Vec::new(),
            val: Vec::new(),
            eval: Vec::new(),
        };
        for &c in &classes[range] {
            let mut xs = by_class.remove(&c).unwrap_or_default();
            xs.shuffle(&mut rng);
            let n = xs.len();
            let n_eval = ((split.eval_fraction * n as f64).round() as usize).clamp(1, n - 1);
            let n_val = ((split.val_fraction * n as f64).round() as usize).min(n - 1 - n_eval);
            for (i, x) in xs.into_iter().enumerate() {
                let s = Sample { x, y: c };
                if i < n_eval {
                    task.eval.push(s);
                } else if i < n_eval + n_val {
                    task.val.push(s);
                } else {
                    task.train.push(s);
                }
            }
        }
        tasks.push(task);
    }
    TaskStream::new(dim, tasks)
}

/// Hands out task data phase by phase and counts reads that would break the
/// exemplar-free contract (training or prototype access to another task's
/// samples). Evaluation reads of past tasks' eval splits are legitimate.
#[derive(Debug)]
pub struct StreamGuard<'a> {
    stream: &'a TaskStream,
    phase: Cell<usize>,
    cross_task: Cell<u64>,
    diagnostic: Cell<u64>,
}

impl<'a> StreamGuard<'a> {
    pub fn new(stream: &'a TaskStream) -> Self {
        StreamGuard {
            stream,
            phase: Cell::new(0),
            cross_task: Cell::new(0),
            diagnostic: Cell::new(0),
        }
    }

    pub fn begin_task(&self, t: usize) {
        self.phase.set(t);
    }

    pub fn phase(&self) -> usize {
        self.phase.get()
    }

    /// Training/prototype split of task `t`.
    pub fn learning_split(&self, t: usize, split: Split) -> &'a [Sample] {
        if t != self.phase.get() {
            self.cross_task.set(self.cross_task.get() + 1);
        }
        self.stream.task(t).split(split)
    }

    /// Eval split for cumulative testing; future tasks count as a violation.
    pub fn eval_split(&self, t: usize) -> &'a [Sample] {
        if t > self.phase.get() {
            self.cross_task.set(self.cross_task.get() + 1);
        }
        &self.stream.task(t).eval
    }

    /// Measurement-only access (true prototypes in diagnostics).
    pub fn diagnostic_split(&self, t: usize, split: Split) -> &'a [Sample] {
        self.diagnostic.set(self.diagnostic.get() + 1);
        self.stream.task(t).split(split)
    }

    pub fn classes(&self, t: usize) -> &'a [usize] {
        &self.stream.task(t).classes
    }

    pub fn cross_task_reads(&self) -> u64 {
        self.cross_task.get()
    }

    pub fn diagnostic_reads(&self) -> u64 {
        self.diagnostic.get()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(n_tasks: usize, drift: DriftModel) -> StreamSpec {
        StreamSpec {
            n_tasks,
            base_classes: 0,
            inc_classes: 3,
            train_per_class: 20,
            val_per_class: 0,
            eval_per_class: 10,
            input_dim: 8,
            cluster_separation: 5.0,
            noise_sigma: 0.3,
            signal_dim: 0,
            nuisance_sigma: 0.0,
            center_offset: 0.0,
            drift,
            seed: 11,
        }
    }

    #[test]
    fn single_task_base_five() {
        let mut s = spec(1, DriftModel::None);
        s.base_classes = 5;
        let stream = generate_synthetic_stream(&s).unwrap();
        assert_eq!(stream.n_tasks(), 1);
        assert_eq!(stream.task(1).classes, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let s = spec(3, DriftModel::Rotation { angle: 0.2 });
        let a = serde_json::to_vec(&generate_synthetic_stream(&s).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_synthetic_stream(&s).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nearest_centroid_oracle_separates_drift_free_stream() {
        let mut s = spec(4, DriftModel::None);
        s.cluster_separation = 10.0;
        s.noise_sigma = 0.5;
        let stream = generate_synthetic_stream(&s).unwrap();
        let mut centroids = Vec::new();
        for t in &stream.tasks {
            for &c in &t.classes {
                let xs: Vec<&Sample> = t.train.iter().filter(|s| s.y == c).collect();
                let mut m = vec![0.0; 8];
                for x in &xs {
                    for (a, b) in m.iter_mut().zip(&x.x) {
                        *a += b / xs.len() as f64;
                    }
                }
                centroids.push((c, m));
            }
        }
        let mut correct = 0;
        let mut total = 0;
        for t in &stream.tasks {
            for smp in &t.eval {
                let best = centroids
                    .iter()
                    .min_by(|a, b| {
                        let da: f64 = a.1.iter().zip(&smp.x).map(|(p, q)| (p - q).powi(2)).sum();
                        let db: f64 = b.1.iter().zip(&smp.x).map(|(p, q)| (p - q).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                correct += usize::from(best.0 == smp.y);
                total += 1;
            }
        }
        assert!(correct as f64 / total as f64 >= 0.99);
    }

    #[test]
    fn drift_moves_later_tasks_only() {
        let base = generate_synthetic_stream(&spec(3, DriftModel::None)).unwrap();
        let off = generate_synthetic_stream(&spec(3, DriftModel::Offset { magnitude: 2.0 })).unwrap();
        assert_eq!(base.task(1), off.task(1));
        let shift: Vec<f64> = off.task(3).train[0]
            .x
            .iter()
            .zip(&base.task(3).train[0].x)
            .map(|(a, b)| a - b)
            .collect();
        assert!((l2_norm(&shift) - 4.0).abs() < 1e-12);

        let rot = generate_synthetic_stream(&spec(3, DriftModel::Rotation { angle: 0.4 })).unwrap();
        for (a, b) in rot.task(2).train.iter().zip(&base.task(2).train) {
            assert!((l2_norm(&a.x) - l2_norm(&b.x)).abs() < 1e-12);
        }

        let walk = generate_synthetic_stream(&spec(3, DriftModel::RandomRotation { angle: 0.4 })).unwrap();
        assert_eq!(walk.task(1), base.task(1));
        for t in [2, 3] {
            for (a, b) in walk.task(t).train.iter().zip(&base.task(t).train) {
                assert!((l2_norm(&a.x) - l2_norm(&b.x)).abs() < 1e-12);
            }
        }
        assert_ne!(walk.task(3), rot.task(3));
    }

    #[test]
    fn class_arithmetic() {
        assert_eq!(partition_classes(4, 2, 2).unwrap(), vec![0..2, 2..4]);
        assert_eq!(partition_classes(10, 0, 5).unwrap().len(), 2);
        assert!(partition_classes(5, 2, 2).is_err());
        let mut s = spec(2, DriftModel::None);
        s.inc_classes = 0;
        s.base_classes = 3;
        assert!(matches!(generate_synthetic_stream(&s), Err(Error::Config(_))));
    }

    #[test]
    fn drift_model_parsing() {
        assert_eq!("none".parse::<DriftModel>().unwrap(), DriftModel::None);
        assert_eq!("offset:1.5".parse::<DriftModel>().unwrap(), DriftModel::Offset { magnitude: 1.5 });
        let r: DriftModel = "rotation:0.25".parse().unwrap();
        assert_eq!(r.to_string().parse::<DriftModel>().unwrap(), r);
        assert!("rotation".parse::<DriftModel>().is_err());
        assert!("spin:1".parse::<DriftModel>().is_err());
        let w: DriftModel = "random_rotation:0.5".parse().unwrap();
        assert_eq!(w, DriftModel::RandomRotation { angle: 0.5 });
        assert_eq!(w.to_string().parse::<DriftModel>().unwrap(), w);
    }

    #[test]
    fn rows_need_two_samples_per_class() {
        let split = SplitSpec {
            base_classes: 1,
            inc_classes: 1,
            eval_fraction: 0.5,
            val_fraction: 0.0,
            seed: 0,
        };
        let rows = vec![(0, vec![1.0]), (0, vec![2.0]), (1, vec![3.0])];
        let err = stream_from_rows(rows, 1, &split).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("class 1")));
    }

    #[test]
    fn guard_counts_cross_task_reads() {
        let stream = generate_synthetic_stream(&spec(3, DriftModel::None)).unwrap();
        let guard = StreamGuard::new(&stream);
        guard.begin_task(2);
        guard.learning_split(2, Split::Train);
        guard.eval_split(1);
        assert_eq!(guard.cross_task_reads(), 0);
        guard.learning_split(1, Split::Train);
        guard.eval_split(3);
        assert_eq!(guard.cross_task_reads(), 2);
        guard.diagnostic_split(1, Split::Eval);
        assert_eq!(guard.diagnostic_reads(), 1);
    }
}
