//! Running-average adapter merging with initial-weight replacement and an
//! early-stop threshold, plus barycentric interpolation for loss-landscape
//! scans.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::adapter::AdapterWeights;
use crate::backbone::Backbone;
use crate::classifier::ClassifierWeights;
use crate::diagnostics::fmt_f64;
use crate::error::{Error, Result};
use crate::prototype::{prototypes_from_features, SubspaceTag};

/// Early-stop threshold `L`: merging (and training) happens for tasks
/// `t <= L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MergeLimit {
    #[default]
    Unbounded,
    Tasks(usize),
}

impl MergeLimit {
    pub fn validate(self) -> Result<Self> {
        match self {
            MergeLimit::Tasks(0) => Err(Error::Config("early-stop threshold L must be >= 1".into())),
            other => Ok(other),
        }
    }
}

impl fmt::Display for MergeLimit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MergeLimit::Unbounded => write!(f, "inf"),
            MergeLimit::Tasks(l) => write!(f, "{l}"),
        }
    }
}

impl FromStr for MergeLimit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "Inf" | "none" | "∞" => Ok(MergeLimit::Unbounded),
            n => n
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid early-stop threshold `{s}`")))
                .map(MergeLimit::Tasks)
                .and_then(MergeLimit::validate),
        }
    }
}

impl Serialize for MergeLimit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MergeLimit::Unbounded => s.serialize_str("inf"),
            MergeLimit::Tasks(l) => s.serialize_u64(*l as u64),
        }
    }
}

impl<'de> Deserialize<'de> for MergeLimit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => MergeLimit::Tasks(n as usize)
                .validate()
                .map_err(serde::de::Error::custom),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// True iff task `t` (1-based) still trains and merges.
pub fn should_merge(t: usize, limit: MergeLimit) -> bool {
    match limit {
        MergeLimit::Unbounded => true,
        MergeLimit::Tasks(l) => t <= l,
    }
}

/// What a [`MergeTrail::merge_step`] did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeOutcome {
    /// First task: `Ā_1 = θ_1`.
    Initialized,
    Merged,
    /// `t > L`: weights untouched.
    Frozen,
}

/// Merged snapshots `Ā_1..Ā_k` with `k = min(t, L)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeTrail {
    snapshots: Vec<AdapterWeights>,
    merge_count: usize,
    init_weights: AdapterWeights,
    limit: MergeLimit,
    ir_enabled: bool,
}

impl MergeTrail {
    pub fn new(init_weights: AdapterWeights, limit: MergeLimit, ir_enabled: bool) -> Result<Self> {
        Ok(MergeTrail {
            snapshots: Vec::new(),
            merge_count: 0,
            init_weights,
            limit: limit.validate()?,
            ir_enabled,
        })
    }

    pub fn snapshots(&self) -> &[AdapterWeights] {
        &self.snapshots
    }

    /// Snapshot `Ā_k`, 1-based.
    pub fn snapshot(&self, k: usize) -> Option<&AdapterWeights> {
        k.checked_sub(1).and_then(|i| self.snapshots.get(i))
    }

    pub fn current(&self) -> Option<&AdapterWeights> {
        self.snapshots.last()
    }

    /// Number of tasks processed so far (`t`).
    pub fn merge_count(&self) -> usize {
        self.merge_count
    }

    /// Initialization handed to the next task's training.
    pub fn init_weights(&self) -> &AdapterWeights {
        &self.init_weights
    }

    pub fn limit(&self) -> MergeLimit {
        self.limit
    }

    pub fn ir_enabled(&self) -> bool {
        self.ir_enabled
    }

    /// Whether the next task (`t + 1`) would train and merge.
    pub fn next_merges(&self) -> bool {
        should_merge(self.merge_count + 1, self.limit)
    }

    /// Index of the snapshot that defines task `t`'s subspace.
    pub fn snapshot_index_for_task(&self, t: usize) -> usize {
        match self.limit {
            MergeLimit::Unbounded => t,
            MergeLimit::Tasks(l) => t.min(l),
        }
    }

    /// Folds task adapter `θ_t` into the running average
    /// `θ̄_t = (1 − 1/t) θ̄_{t−1} + (1/t) θ_t`, computed in the incremental
    /// form `θ̄_{t−1} + (θ_t − θ̄_{t−1}) / t`. Past `L` only the counter moves.
    pub fn merge_step(&mut self, theta: &AdapterWeights) -> Result<MergeOutcome> {
        self.init_weights.ensure_same_shape(theta)?;
        let t = self.merge_count + 1;
        if !should_merge(t, self.limit) {
            self.merge_count = t;
            return Ok(MergeOutcome::Frozen);
        }
        if t == 1 {
            self.snapshots.push(theta.clone());
            if self.ir_enabled {
                self.init_weights = theta.clone();
            }
            self.merge_count = t;
            return Ok(MergeOutcome::Initialized);
        }
        let prev = self.snapshots.last().expect("t >= 2 has a snapshot");
        let inv_t = 1.0 / t as f64;
        let merged = prev.zip_with(theta, |avg, new| avg + (new - avg) * inv_t)?;
        self.snapshots.push(merged);
        self.merge_count = t;
        Ok(MergeOutcome::Merged)
    }

    /// Advances `t` for a task past the threshold without an adapter.
    pub fn advance_frozen(&mut self) -> Result<()> {
        let t = self.merge_count + 1;
        if should_merge(t, self.limit) {
            return Err(Error::Config(format!(
                "task {t} is within the merge threshold {} and needs an adapter",
                self.limit
            )));
        }
        self.merge_count = t;
        Ok(())
    }
}

/// Barycentric coordinates `(u, v)` with weight `1 − u − v` on the third
/// vertex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationPoint {
    u: f64,
    v: f64,
}

impl InterpolationPoint {
    pub fn new(u: f64, v: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && u + v <= 1.0 + 1e-12;
        if !ok {
            return Err(Error::Config(format!("({u}, {v}) is outside the simplex")));
        }
        Ok(InterpolationPoint { u, v })
    }

    pub fn u(&self) -> f64 {
        self.u
    }

    pub fn v(&self) -> f64 {
        self.v
    }

    pub fn w(&self) -> f64 {
        (1.0 - self.u - self.v).max(0.0)
    }
}

/// `u·a + v·b + (1 − u − v)·c`, entrywise. Vertices return the vertex
/// bundle bit for bit.
pub fn interpolate3(
    a: &AdapterWeights,
    b: &AdapterWeights,
    c: &AdapterWeights,
    p: InterpolationPoint,
) -> Result<AdapterWeights> {
    a.ensure_same_shape(b)?;
    a.ensure_same_shape(c)?;
    let (u, v, w) = (p.u(), p.v(), p.w());
    if u == 1.0 {
        return Ok(a.clone());
    }
    if v == 1.0 {
        return Ok(b.clone());
    }
    if w == 1.0 {
        return Ok(c.clone());
    }
    let ab = a.zip_with(b, |x, y| u * x + v * y)?;
    ab.zip_with(c, |xy, z| xy + w * z)
}

/// Samples for a landscape scan: prototypes come from `prototype_samples`,
/// the error is measured on `eval_samples`.
#[derive(Clone, Debug)]
pub struct LandscapeData<'a> {
    pub prototype_samples: Vec<(&'a [f64], usize)>,
    pub eval_samples: Vec<(&'a [f64], usize)>,
}

/// Top-1 error of a cosine-prototype classifier built in `adapter`'s
/// subspace.
pub fn classification_error(
    backbone: &Backbone,
    adapter: &AdapterWeights,
    data: &LandscapeData<'_>,
) -> Result<f64> {
    if data.eval_samples.is_empty() || data.prototype_samples.is_empty() {
        return Err(Error::Data("landscape test set is empty".into()));
    }
    let mut classes: Vec<usize> = data.prototype_samples.iter().map(|(_, c)| *c).collect();
    classes.sort_unstable();
    classes.dedup();
    let feats = data
        .prototype_samples
        .iter()
        .map(|(x, c)| Ok((backbone.forward_features(Some(adapter), x)?, *c)))
        .collect::<Result<Vec<_>>>()?;
    let protos = prototypes_from_features(
        0,
        SubspaceTag::Adhoc,
        &classes,
        backbone.embed_dim(),
        feats.iter().map(|(f, c)| (&f[..], *c)),
    )?;
    let clf = ClassifierWeights::from_prototypes(&[&protos])?;
    let mut wrong = 0usize;
    for (x, y) in &data.eval_samples {
        let f = backbone.forward_features(Some(adapter), x)?;
        if clf.predict_class(&f)? != *y {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / data.eval_samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapePoint {
    /// Lattice indices: `u = i / (G − 1)`, `v = j / (G − 1)`.
    pub i: usize,
    pub j: usize,
    pub u: f64,
    pub v: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub size: usize,
    pub points: Vec<LandscapePoint>,
}

impl LandscapeGrid {
    /// Number of lattice points inside the simplex, `G (G + 1) / 2`.
    pub fn valid_point_count(size: usize) -> usize {
        size * (size + 1) / 2
    }

    /// Dense `G x G` view; cells outside the simplex are `None`.
    pub fn to_dense(&self) -> Vec<Vec<Option<f64>>> {
        let mut grid = vec![vec![None; self.size]; self.size];
        for p in &self.points {
            grid[p.i][p.j] = Some(p.error);
        }
        grid
    }

    pub fn at(&self, i: usize, j: usize) -> Option<f64> {
        self.points.iter().find(|p| p.i == i && p.j == j).map(|p| p.error)
    }

    pub fn min_error(&self) -> f64 {
        self.points.iter().map(|p| p.error).fold(f64::INFINITY, f64::min)
    }

    /// `u,v,error` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("u,v,error\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", fmt_f64(p.u), fmt_f64(p.v), fmt_f64(p.error)));
        }
        out
    }
}

/// Error of every interpolated adapter on the `G x G` simplex lattice
/// spanned by `a`, `b`, `c`.
pub fn landscape_scan(
    backbone: &Backbone,
    a: &AdapterWeights,
    b: &AdapterWeights,
    c: &AdapterWeights,
    data: &LandscapeData<'_>,
    size: usize,
) -> Result<LandscapeGrid> {
    if size < 2 {
        return Err(Error::Config("landscape grid size must be >= 2".into()));
    }
    if data.eval_samples.is_empty() || data.prototype_samples.is_empty() {
        return Err(Error::Data("landscape test set is empty".into()));
    }
    let steps = (size - 1) as f64;
    let mut points = Vec::with_capacity(LandscapeGrid::valid_point_count(size));
    for i in 0..size {
        for j in 0..size - i {
            let (u, v) = (i as f64 / steps, j as f64 / steps);
            let theta = interpolate3(a, b, c, InterpolationPoint::new(u, v)?)?;
            let error = classification_error(backbone, &theta, data)?;
            points.push(LandscapePoint { i, j, u, v, error });
        }
    }
    Ok(LandscapeGrid { size, points })
}
