//! Class prototypes, centroid prototype mapping, and the summed-shift (SDC)
//! baseline mapping.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterWeights;
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::numerics::{CompensatedSum, Matrix, Vector};

/// Identifies the feature subspace a prototype was computed (or mapped) in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SubspaceTag {
    /// The frozen backbone with no adapter.
    Backbone,
    /// Merged snapshot `Ā_k` (1-based).
    Merged(usize),
    /// Individual task adapter `θ_k` (1-based).
    Individual(usize),
    /// An ad-hoc adapter such as a landscape interpolation point.
    Adhoc,
}

impl fmt::Display for SubspaceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubspaceTag::Backbone => write!(f, "backbone"),
            SubspaceTag::Merged(k) => write!(f, "merged:{k}"),
            SubspaceTag::Individual(k) => write!(f, "adapter:{k}"),
            SubspaceTag::Adhoc => write!(f, "adhoc"),
        }
    }
}

impl FromStr for SubspaceTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid subspace tag `{s}`"));
        match s {
            "backbone" => Ok(SubspaceTag::Backbone),
            "adhoc" => Ok(SubspaceTag::Adhoc),
            _ => {
                let (kind, idx) = s.split_once(':').ok_or_else(bad)?;
                let idx: usize = idx.parse().map_err(|_| bad())?;
                match kind {
                    "merged" => Ok(SubspaceTag::Merged(idx)),
                    "adapter" => Ok(SubspaceTag::Individual(idx)),
                    _ => Err(bad()),
                }
            }
        }
    }
}

impl TryFrom<String> for SubspaceTag {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SubspaceTag> for String {
    fn from(t: SubspaceTag) -> String {
        t.to_string()
    }
}

/// Prototype rows of one task, one row per class in ascending class order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeMatrix {
    pub task_id: usize,
    pub tag: SubspaceTag,
    pub class_ids: Vec<usize>,
    pub rows: Matrix,
    pub mapped: bool,
}

impl PrototypeMatrix {
    pub fn new(task_id: usize, tag: SubspaceTag, class_ids: Vec<usize>, rows: Matrix) -> Result<Self> {
        if rows.rows() != class_ids.len() {
            return Err(Error::shape(format!(
                "{} prototype rows for {} classes",
                rows.rows(),
                class_ids.len()
            )));
        }
        if !rows.is_finite() {
            return Err(Error::Numeric(format!("task {task_id} prototypes are not finite")));
        }
        Ok(PrototypeMatrix {
            task_id,
            tag,
            class_ids,
            rows,
            mapped: false,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    /// Mean of the rows.
    pub fn centroid(&self) -> Vector {
        let mut acc = vec![CompensatedSum::default(); self.dim()];
        for row in self.rows.row_iter() {
            for (a, v) in acc.iter_mut().zip(row) {
                a.add(*v);
            }
        }
        let n = self.n_classes() as f64;
        Vector(acc.iter().map(|a| a.value() / n).collect())
    }
}

/// Mean feature per class. `features` pairs a feature vector with its class.
/// Every class in `classes` needs at least one sample.
pub fn prototypes_from_features<'a, I>(
    task_id: usize,
    tag: SubspaceTag,
    classes: &[usize],
    dim: usize,
    features: I,
) -> Result<PrototypeMatrix>
where
    I: IntoIterator<Item = (&'a [f64], usize)>,
{
    let mut class_ids = classes.to_vec();
    class_ids.sort_unstable();
    class_ids.dedup();
    let mut sums = vec![vec![CompensatedSum::default(); dim]; class_ids.len()];
    let mut counts = vec![0usize; class_ids.len()];
    for (f, c) in features {
        if f.len() != dim {
            return Err(Error::shape(format!("feature dim {} != {dim}", f.len())));
        }
        let k = class_ids.binary_search(&c).map_err(|_| {
            Error::Data(format!("class {c} is not part of task {task_id}"))
        })?;
        counts[k] += 1;
        for (s, v) in sums[k].iter_mut().zip(f) {
            s.add(*v);
        }
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!(
            "class {} of task {task_id} has no samples",
            class_ids[k]
        )));
    }
    let mut rows = Matrix::zeros(class_ids.len(), dim);
    for (k, (s, n)) in sums.iter().zip(&counts).enumerate() {
        for (o, acc) in rows.row_mut(k).iter_mut().zip(s) {
            *o = acc.value() / *n as f64;
        }
    }
    PrototypeMatrix::new(task_id, tag, class_ids, rows)
}

/// Prototypes of one task's samples in the subspace of `adapter`.
pub fn compute_prototypes(
    backbone: &Backbone,
    adapter: Option<&AdapterWeights>,
    tag: SubspaceTag,
    task_id: usize,
    classes: &[usize],
    samples: &[(&[f64], usize)],
) -> Result<PrototypeMatrix> {
    let feats = samples
        .iter()
        .map(|(x, c)| Ok((backbone.forward_features(adapter, x)?, *c)))
        .collect::<Result<Vec<_>>>()?;
    prototypes_from_features(
        task_id,
        tag,
        classes,
        backbone.embed_dim(),
        feats.iter().map(|(f, c)| (&f[..], *c)),
    )
}

/// Mean prototype displacement of one task between two subspaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidShift {
    pub delta: Vector,
    pub from_tag: SubspaceTag,
    pub to_tag: SubspaceTag,
}

impl CentroidShift {
    pub fn zero(dim: usize, from_tag: SubspaceTag, to_tag: SubspaceTag) -> Self {
        CentroidShift {
            delta: Vector::zeros(dim),
            from_tag,
            to_tag,
        }
    }
}

fn ensure_aligned(a: &PrototypeMatrix, b: &PrototypeMatrix) -> Result<()> {
    if a.task_id != b.task_id || a.class_ids != b.class_ids {
        return Err(Error::Alignment(format!(
            "prototypes of task {} {:?} and task {} {:?} do not describe the same classes",
            a.task_id, a.class_ids, b.task_id, b.class_ids
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::shape("prototype dims differ"));
    }
    Ok(())
}

/// `(1/C) Σ_c (current_c − old_c)`: how the task's prototypes moved from
/// `old.tag` to `current.tag`.
pub fn centroid_shift(current: &PrototypeMatrix, old: &PrototypeMatrix) -> Result<CentroidShift> {
    ensure_aligned(current, old)?;
    if current.tag == old.tag {
        return Err(Error::Alignment(format!(
            "both prototype sets live in subspace {}",
            current.tag
        )));
    }
    let n = current.n_classes() as f64;
    let mut acc = vec![CompensatedSum::default(); current.dim()];
    for (rc, ro) in current.rows.row_iter().zip(old.rows.row_iter()) {
        for ((a, c), o) in acc.iter_mut().zip(rc).zip(ro) {
            a.add(c - o);
        }
    }
    Ok(CentroidShift {
        delta: Vector(acc.iter().map(|a| a.value() / n).collect()),
        from_tag: old.tag,
        to_tag: current.tag,
    })
}

fn translate(old: &PrototypeMatrix, delta: &[f64], to_tag: SubspaceTag) -> Result<PrototypeMatrix> {
    if delta.len() != old.dim() {
        return Err(Error::shape("shift dim differs from prototype dim"));
    }
    let mut out = old.clone();
    for r in 0..out.rows.rows() {
        for (v, d) in out.rows.row_mut(r).iter_mut().zip(delta) {
            *v += d;
        }
    }
    out.tag = to_tag;
    out.mapped = true;
    Ok(out)
}

/// Moves `old` into `shift.to_tag` by adding the centroid shift to every row.
pub fn centroid_map(old: &PrototypeMatrix, shift: &CentroidShift) -> Result<PrototypeMatrix> {
    if shift.from_tag != old.tag {
        return Err(Error::Alignment(format!(
            "shift starts at {} but prototypes live in {}",
            shift.from_tag, old.tag
        )));
    }
    translate(old, &shift.delta, shift.to_tag)
}

/// Semantic-drift-compensation style mapping: adds the sum of a contiguous
/// chain of per-step shifts. An empty chain is the identity.
pub fn sdc_map(old: &PrototypeMatrix, steps: &[CentroidShift]) -> Result<PrototypeMatrix> {
    let Some(last) = steps.last() else {
        return Ok(old.clone());
    };
    let mut at = old.tag;
    let mut total = vec![CompensatedSum::default(); old.dim()];
    for (k, s) in steps.iter().enumerate() {
        if s.from_tag != at {
            return Err(Error::Alignment(format!(
                "step {k} starts at {} but the chain is at {at}",
                s.from_tag
            )));
        }
        if s.delta.dim() != old.dim() {
            return Err(Error::shape("shift dim differs from prototype dim"));
        }
        for (t, d) in total.iter_mut().zip(s.delta.iter()) {
            t.add(*d);
        }
        at = s.to_tag;
    }
    let delta: Vec<f64> = total.iter().map(CompensatedSum::value).collect();
    translate(old, &delta, last.to_tag)
}

/// All prototype matrices produced during a run, keyed by
/// `(task, subspace, mapped)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    entries: Vec<PrototypeMatrix>,
}

impl PrototypeStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts, replacing any entry with the same `(task, tag, mapped)` key.
    pub fn insert(&mut self, p: PrototypeMatrix) {
        match self
            .entries
            .iter_mut()
            .find(|e| e.task_id == p.task_id && e.tag == p.tag && e.mapped == p.mapped)
        {
            Some(e) => *e = p,
            None => self.entries.push(p),
        }
    }

    /// Raw prototypes computed from the task's own data.
    pub fn raw(&self, task_id: usize) -> Option<&PrototypeMatrix> {
        self.entries
            .iter()
            .rev()
            .find(|e| e.task_id == task_id && !e.mapped)
    }

    /// Prototypes of `task_id` living in `tag`, raw preferred over mapped.
    pub fn get(&self, task_id: usize, tag: SubspaceTag) -> Option<&PrototypeMatrix> {
        let mut matches = self.entries.iter().filter(|e| e.task_id == task_id && e.tag == tag);
        let first = matches.next()?;
        if !first.mapped {
            return Some(first);
        }
        Some(matches.find(|e| !e.mapped).unwrap_or(first))
    }

    pub fn entries(&self) -> &[PrototypeMatrix] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `task_id,class_id,adapter_tag,mapped_flag,v0..v{d-1}`
    pub fn to_csv(&self) -> String {
        let dim = self.entries.first().map_or(0, PrototypeMatrix::dim);
        let mut out = String::from("task_id,class_id,adapter_tag,mapped_flag");
        for i in 0..dim {
            out.push_str(&format!(",v{i}"));
        }
        out.push('\n');
        let mut entries: Vec<&PrototypeMatrix> = self.entries.iter().collect();
        entries.sort_by_key(|e| (e.task_id, e.tag, e.mapped));
        for e in entries {
            for (c, row) in e.class_ids.iter().zip(e.rows.row_iter()) {
                out.push_str(&format!("{},{},{},{}", e.task_id, c, e.tag, u8::from(e.mapped)));
                for v in row {
                    out.push(',');
                    out.push_str(&crate::diagnostics::fmt_f64(*v));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}
