//! Alignment and convergence curves plus CSV/JSON exports.
//!
//! Everything here is read-only over finished runs. True prototypes are
//! computed from retained task data, which only measurement code may touch.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, Backbone};
use crate::error::{Error, Result};
use crate::harness::{run_experiment, train_consecutive_adapters, ExperimentSpec, RunArtifacts, Split, TaskStream};
use crate::merging::{classification_error, landscape_scan, LandscapeData, LandscapeGrid};
use crate::numerics::cosine_sim;
use crate::prototype::{centroid_map, centroid_shift, compute_prototypes, sdc_map, PrototypeMatrix, SubspaceTag};

/// Floats in CSV output: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn export_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("serialization: {e}")))?;
    write_atomic(path, text.as_bytes())
}

pub fn import_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: 0,
        message: format!("{}: {e}", path.display()),
    })
}

/// Candidate prototypes compared against the truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentVariant {
    /// Centroid-mapped into the current subspace.
    Mapped,
    /// Left in the subspace where they were computed.
    Unmapped,
    /// Moved by the sum of consecutive per-step shifts.
    Sdc,
}

impl AlignmentVariant {
    pub const ALL: [AlignmentVariant; 3] = [AlignmentVariant::Mapped, AlignmentVariant::Unmapped, AlignmentVariant::Sdc];

    pub fn as_str(self) -> &'static str {
        match self {
            AlignmentVariant::Mapped => "mapped",
            AlignmentVariant::Unmapped => "unmapped",
            AlignmentVariant::Sdc => "sdc",
        }
    }
}

impl fmt::Display for AlignmentVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlignmentVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AlignmentVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown alignment variant `{s}`")))
    }
}

/// Cosine between candidate and true prototypes of one anchor task, for
/// `t = anchor..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSeries {
    pub anchor_task: usize,
    pub variant: AlignmentVariant,
    pub ts: Vec<usize>,
    pub class_ids: Vec<usize>,
    /// `per_class[c][k]` is class `class_ids[c]` at `ts[k]`.
    pub per_class: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl AlignmentSeries {
    pub fn overall_mean(&self) -> f64 {
        self.mean.iter().sum::<f64>() / self.mean.len() as f64
    }
}

fn missing(what: String) -> Error {
    Error::IncompleteArtifacts(what)
}

/// Prototypes of task `i` in subspace `Ā_k`, from retained data.
fn true_prototypes(
    backbone: &Backbone,
    stream: &TaskStream,
    artifacts: &RunArtifacts,
    i: usize,
    k: usize,
    split: Split,
) -> Result<PrototypeMatrix> {
    let snap = artifacts
        .snapshot(k)
        .ok_or_else(|| missing(format!("snapshot {k} not retained")))?;
    let task = stream.task(i);
    let samples: Vec<(&[f64], usize)> = task.split(split).iter().map(|s| (&s.x[..], s.y)).collect();
    compute_prototypes(backbone, Some(snap), SubspaceTag::Merged(k), i, &task.classes, &samples)
}

fn candidate(
    artifacts: &RunArtifacts,
    i: usize,
    t: usize,
    variant: AlignmentVariant,
) -> Result<PrototypeMatrix> {
    let idx = &artifacts.snapshot_index;
    let raw = &artifacts.raw[i - 1];
    let (k_i, k_t) = (idx[i - 1], idx[t - 1]);
    match variant {
        AlignmentVariant::Unmapped => Ok(raw.clone()),
        _ if k_i == k_t => Ok(raw.clone()),
        AlignmentVariant::Mapped => {
            let shift = artifacts
                .cm_shifts
                .iter()
                .find(|(a, b, _)| *a == i && *b == t)
                .map(|(_, _, s)| s)
                .ok_or_else(|| missing(format!("no centroid shift recorded for anchor {i} at task {t}")))?;
            centroid_map(raw, shift)
        }
        AlignmentVariant::Sdc => {
            let mut steps = Vec::new();
            for j in i + 1..=t {
                if idx[j - 1] == idx[j - 2] {
                    continue;
                }
                let prev = artifacts.previous[j - 1]
                    .as_ref()
                    .ok_or_else(|| missing(format!("previous-subspace prototypes of task {j} not recorded")))?;
                steps.push(centroid_shift(&artifacts.raw[j - 1], prev)?);
            }
            sdc_map(raw, &steps)
        }
    }
}

fn check_artifacts(artifacts: &RunArtifacts, stream: &TaskStream) -> Result<()> {
    let n = artifacts.n_tasks();
    if n == 0 || artifacts.snapshots.is_empty() {
        return Err(missing("run has no merged snapshots".into()));
    }
    if artifacts.snapshot_index.len() != n || artifacts.previous.len() != n || n > stream.n_tasks() {
        return Err(missing("artifacts do not match the stream".into()));
    }
    Ok(())
}

/// Alignment of anchor task `anchor`'s prototypes over the rest of the run.
/// `truth_split` chooses the retained data for true prototypes; using the
/// split prototypes were built from makes `t == anchor` exactly aligned.
pub fn cosine_alignment_curve(
    backbone: &Backbone,
    stream: &TaskStream,
    artifacts: &RunArtifacts,
    anchor: usize,
    variant: AlignmentVariant,
    truth_split: Split,
) -> Result<AlignmentSeries> {
    check_artifacts(artifacts, stream)?;
    let n = artifacts.n_tasks();
    if anchor == 0 || anchor > n {
        return Err(missing(format!("anchor task {anchor} outside 1..={n}")));
    }
    let class_ids = artifacts.raw[anchor - 1].class_ids.clone();
    let mut per_class = vec![Vec::new(); class_ids.len()];
    let mut mean = Vec::new();
    let ts: Vec<usize> = (anchor..=n).collect();
    for &t in &ts {
        let k_t = artifacts.snapshot_index[t - 1];
        let truth = true_prototypes(backbone, stream, artifacts, anchor, k_t, truth_split)?;
        let cand = candidate(artifacts, anchor, t, variant)?;
        let mut sum = 0.0;
        for (c, curve) in per_class.iter_mut().enumerate() {
            let v = cosine_sim(cand.rows.row(c), truth.rows.row(c))?;
            curve.push(v);
            sum += v;
        }
        mean.push(sum / class_ids.len() as f64);
    }
    Ok(AlignmentSeries {
        anchor_task: anchor,
        variant,
        ts,
        class_ids,
        per_class,
        mean,
    })
}

/// Alignment curves for every anchor task.
pub fn all_alignment_curves(
    backbone: &Backbone,
    stream: &TaskStream,
    artifacts: &RunArtifacts,
    variant: AlignmentVariant,
    truth_split: Split,
) -> Result<Vec<AlignmentSeries>> {
    (1..=artifacts.n_tasks())
        .map(|i| cosine_alignment_curve(backbone, stream, artifacts, i, variant, truth_split))
        .collect()
}

/// Mean cosine over every `(anchor, t > anchor, class)` point.
pub fn mean_offdiagonal_alignment(series: &[AlignmentSeries]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in series {
        for curve in &s.per_class {
            for v in curve.iter().skip(1) {
                sum += v;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Per-task similarity between a task's prototypes under consecutive
/// merged snapshots; values approaching 1 suggest merging can stop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSeries {
    pub ts: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn merge_convergence_curve(artifacts: &RunArtifacts) -> Result<ConvergenceSeries> {
    let n = artifacts.n_tasks();
    if n < 2 || artifacts.previous.len() != n {
        return Err(missing("convergence needs at least two recorded tasks".into()));
    }
    let mut ts = Vec::with_capacity(n - 1);
    let mut values = Vec::with_capacity(n - 1);
    for t in 2..=n {
        let prev = artifacts.previous[t - 1]
            .as_ref()
            .ok_or_else(|| missing(format!("previous-subspace prototypes of task {t} not recorded")))?;
        let cur = &artifacts.raw[t - 1];
        let mut sum = 0.0;
        for (a, b) in prev.rows.row_iter().zip(cur.rows.row_iter()) {
            sum += cosine_sim(a, b)?;
        }
        ts.push(t);
        values.push(sum / cur.n_classes() as f64);
    }
    Ok(ConvergenceSeries { ts, values })
}

/// `anchor_task,class_id,t,variant,cos`; mean rows use class id `mean`.
pub fn alignment_csv(series: &[AlignmentSeries]) -> String {
    let mut out = String::from("anchor_task,class_id,t,variant,cos\n");
    for s in series {
        for (c, curve) in s.class_ids.iter().zip(&s.per_class) {
            for (t, v) in s.ts.iter().zip(curve) {
                out.push_str(&format!("{},{c},{t},{},{}\n", s.anchor_task, s.variant, fmt_f64(*v)));
            }
        }
        for (t, v) in s.ts.iter().zip(&s.mean) {
            out.push_str(&format!("{},mean,{t},{},{}\n", s.anchor_task, s.variant, fmt_f64(*v)));
        }
    }
    out
}

/// `t,cos`.
pub fn convergence_csv(series: &ConvergenceSeries) -> String {
    let mut out = String::from("t,cos\n");
    for (t, v) in series.ts.iter().zip(&series.values) {
        out.push_str(&format!("{t},{}\n", fmt_f64(*v)));
    }
    out
}

/// Alignment curves for every variant plus the convergence curve of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub alignment: Vec<AlignmentSeries>,
    /// Absent for single-task runs.
    pub convergence: Option<ConvergenceSeries>,
    pub accuracy: Vec<f64>,
}

impl Diagnosis {
    pub fn variant(&self, v: AlignmentVariant) -> Vec<AlignmentSeries> {
        self.alignment.iter().filter(|s| s.variant == v).cloned().collect()
    }
}

/// Re-executes an ACMap experiment with recording on and derives its
/// curves. Recording does not change the run's predictions.
pub fn diagnose_experiment(spec: &ExperimentSpec, truth_split: Split) -> Result<Diagnosis> {
    if spec.method.acmap_flags().is_none() {
        return Err(Error::Config(format!("diagnostics need an acmap variant, got {}", spec.method)));
    }
    let mut spec = spec.clone();
    spec.run.diagnostics = true;
    let stream = spec.build_stream()?;
    let out = run_experiment(&spec)?;
    let backbone = build_backbone(&spec.run.backbone)?;
    let mut alignment = Vec::new();
    for v in AlignmentVariant::ALL {
        alignment.extend(all_alignment_curves(&backbone, &stream, &out.artifacts, v, truth_split)?);
    }
    let convergence = if out.artifacts.n_tasks() >= 2 {
        Some(merge_convergence_curve(&out.artifacts)?)
    } else {
        None
    };
    Ok(Diagnosis {
        alignment,
        convergence,
        accuracy: out.report.per_task_accuracy,
    })
}

/// A landscape scan over the adapters of tasks 1 to 3 together with each
/// adapter's standalone error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeResult {
    pub grid: LandscapeGrid,
    pub standalone_errors: [f64; 3],
}

/// Trains three consecutive adapters and scans their simplex. Prototypes
/// come from the training data of tasks 1 to 3, errors from their eval data.
pub fn landscape_experiment(spec: &ExperimentSpec, size: usize, ir: bool) -> Result<LandscapeResult> {
    let stream = spec.build_stream()?;
    if stream.n_tasks() < 3 {
        return Err(Error::Config("landscape scan needs at least 3 tasks".into()));
    }
    let adapters = train_consecutive_adapters(&stream, &spec.run, 3, ir)?;
    let backbone = build_backbone(&spec.run.backbone)?;
    let pairs = |split: Split| -> Vec<(&[f64], usize)> {
        (1..=3)
            .flat_map(|t| stream.task(t).split(split).iter().map(|s| (&s.x[..], s.y)))
            .collect()
    };
    let data = LandscapeData {
        prototype_samples: pairs(spec.run.prototype_source.split()),
        eval_samples: pairs(Split::Eval),
    };
    let grid = landscape_scan(&backbone, &adapters[0], &adapters[1], &adapters[2], &data, size)?;
    let mut standalone_errors = [0.0; 3];
    for (e, a) in standalone_errors.iter_mut().zip(&adapters) {
        *e = classification_error(&backbone, a, &data)?;
    }
    Ok(LandscapeResult { grid, standalone_errors })
}

/// Something exportable as JSON or CSV.
pub enum Exportable<'a> {
    Report(&'a crate::harness::RunReport),
    Alignment(&'a [AlignmentSeries]),
    Convergence(&'a ConvergenceSeries),
    Landscape(&'a LandscapeGrid),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Csv,
}

impl FromStr for ExportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ExportFormat::Json),
            "csv" => Ok(ExportFormat::Csv),
            _ => Err(Error::Config(format!("unknown export format `{s}`"))),
        }
    }
}

pub fn export(item: Exportable<'_>, path: &Path, format: ExportFormat) -> Result<()> {
    match format {
        ExportFormat::Json => match item {
            Exportable::Report(r) => export_json(r, path),
            Exportable::Alignment(s) => export_json(&s, path),
            Exportable::Convergence(c) => export_json(c, path),
            Exportable::Landscape(g) => export_json(g, path),
        },
        ExportFormat::Csv => {
            let text = match item {
                Exportable::Report(r) => r.to_csv(),
                Exportable::Alignment(s) => alignment_csv(s),
                Exportable::Convergence(c) => convergence_csv(c),
                Exportable::Landscape(g) => g.to_csv(),
            };
            write_atomic(path, text.as_bytes())
        }
    }
}
