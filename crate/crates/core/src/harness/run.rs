//! The incremental loop for ACMap and the two baselines.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, train_task_adapter, AdapterWeights, LabeledBatch, TrainedAdapter};
use crate::backbone::{build_backbone, Backbone};
use crate::classifier::{build_classifier, ClassifierWeights};
use crate::error::{Error, Result};
use crate::merging::{MergeLimit, MergeTrail};
use crate::numerics::Matrix;
use crate::prototype::{centroid_map, centroid_shift, compute_prototypes, CentroidShift, PrototypeMatrix, PrototypeStore, SubspaceTag};

use super::embed::load_embedding_stream;
use super::report::{ExperimentSpec, Method, RunConfig, RunReport, StreamSource, TaskRecord};
use super::stream::{generate_synthetic_stream, PrototypeSource, Sample, Split, StreamGuard, TaskStream};

/// Values recorded for the diagnostics module. Nothing here feeds back
/// into the run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub early_stop: MergeLimit,
    /// Merged snapshots `Ā_1..Ā_k`.
    pub snapshots: Vec<AdapterWeights>,
    /// Individually trained adapters `θ_t`, in task order.
    pub task_adapters: Vec<AdapterWeights>,
    /// Snapshot index defining each task's subspace.
    pub snapshot_index: Vec<usize>,
    /// `P_t` in its own subspace.
    pub raw: Vec<PrototypeMatrix>,
    /// `P_t` in the previous task's subspace (None for t = 1 or when
    /// diagnostics are off).
    pub previous: Vec<Option<PrototypeMatrix>>,
    /// `(anchor i, t, shift)` measured on task t between `Ā_i` and `Ā_t`.
    pub cm_shifts: Vec<(usize, usize, CentroidShift)>,
}

impl RunArtifacts {
    pub fn snapshot(&self, k: usize) -> Option<&AdapterWeights> {
        k.checked_sub(1).and_then(|i| self.snapshots.get(i))
    }

    pub fn n_tasks(&self) -> usize {
        self.raw.len()
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub artifacts: RunArtifacts,
    pub store: PrototypeStore,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Training seed for task `t` of a run seeded with `base`.
pub fn task_seed(base: u64, t: usize) -> u64 {
    splitmix(base ^ (t as u64).wrapping_mul(0xa076_1d64_78bd_642f))
}

/// Seed of the shared initial adapter.
pub fn init_seed(base: u64) -> u64 {
    splitmix(base ^ 0x494e_4954)
}

impl RunConfig {
    pub fn validate(&self, stream: &TaskStream) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        self.early_stop.validate()?;
        if self.backbone.input_dim != stream.input_dim {
            return Err(Error::Config(format!(
                "backbone input_dim {} != stream dim {}",
                self.backbone.input_dim, stream.input_dim
            )));
        }
        if self.adapter.bottleneck == 0 || self.adapter.bottleneck >= self.backbone.embed_dim {
            return Err(Error::Config(format!(
                "adapter bottleneck must satisfy 1 <= r < d (r = {}, d = {})",
                self.adapter.bottleneck, self.backbone.embed_dim
            )));
        }
        if !self.adapter.scale.is_finite() {
            return Err(Error::Config("adapter scale must be finite".into()));
        }
        if self.probe_queries > 0 && self.probe_repeats == 0 {
            return Err(Error::Config("probe_repeats must be >= 1".into()));
        }
        if self.prototype_source == PrototypeSource::Validation {
            for t in &stream.tasks {
                for &c in &t.classes {
                    if !t.val.iter().any(|s| s.y == c) {
                        return Err(Error::Config(format!(
                            "validation prototypes requested but task {} class {c} has no val samples",
                            t.task_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn initial_adapter(&self) -> Result<AdapterWeights> {
        init_adapter(
            self.backbone.n_blocks,
            self.backbone.embed_dim,
            self.adapter.bottleneck,
            self.adapter.scale,
            None,
            init_seed(self.train.seed),
        )
    }
}

fn as_pairs(samples: &[Sample]) -> Vec<(&[f64], usize)> {
    samples.iter().map(|s| (&s.x[..], s.y)).collect()
}

fn train_on_task(
    backbone: &Backbone,
    guard: &StreamGuard<'_>,
    init: &AdapterWeights,
    cfg: &RunConfig,
    t: usize,
) -> Result<TrainedAdapter> {
    let data = guard.learning_split(t, Split::Train);
    let labels: Vec<usize> = data.iter().map(|s| s.y).collect();
    let batch = LabeledBatch::from_global(data.iter().map(|s| &s.x[..]).collect(), &labels)?;
    let mut tc = cfg.train.clone();
    tc.seed = task_seed(cfg.train.seed, t);
    train_task_adapter(backbone, init, &batch, &tc)
}

/// Cumulative top-1 accuracy over the eval splits of tasks `1..=t`.
fn evaluate(
    guard: &StreamGuard<'_>,
    t: usize,
    forwards: &Cell<u64>,
    mut predict: impl FnMut(&[f64]) -> Result<usize>,
) -> Result<(f64, usize, u64)> {
    let before = forwards.get();
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 1..=t {
        for s in guard.eval_split(i) {
            correct += usize::from(predict(&s.x)? == s.y);
            total += 1;
        }
    }
    let passes = forwards.get() - before;
    if total == 0 || passes % total as u64 != 0 {
        return Err(Error::Data(format!("uneven forward-pass count {passes} over {total} queries")));
    }
    Ok((correct as f64 / total as f64, total, passes / total as u64))
}

/// Per-query time of a fixed probe set (task 1 eval samples, cycled),
/// minimum over repeats.
fn probe_time(
    stream: &TaskStream,
    cfg: &RunConfig,
    mut predict: impl FnMut(&[f64]) -> Result<usize>,
) -> Result<Option<f64>> {
    if cfg.probe_queries == 0 {
        return Ok(None);
    }
    let pool = &stream.task(1).eval;
    let mut best = f64::INFINITY;
    for _ in 0..cfg.probe_repeats {
        let start = Instant::now();
        for s in pool.iter().cycle().take(cfg.probe_queries) {
            std::hint::black_box(predict(&s.x)?);
        }
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(Some(best / cfg.probe_queries as f64))
}

fn abort(task: usize, source: Error, mut report: RunReport, guard: &StreamGuard<'_>) -> Error {
    report.cross_task_access_count = guard.cross_task_reads();
    Error::Aborted {
        task,
        source: Box::new(source),
        partial: Box::new(report),
    }
}

struct AcmapState<'s> {
    stream: &'s TaskStream,
    backbone: Backbone,
    cfg: &'s RunConfig,
    cm: bool,
    trail: MergeTrail,
    store: PrototypeStore,
    artifacts: RunArtifacts,
    forwards: Cell<u64>,
}

impl AcmapState<'_> {
    fn step(&mut self, guard: &StreamGuard<'_>, t: usize) -> Result<TaskRecord> {
        let mut rec = TaskRecord::default();
        let clock = Instant::now();
        if self.trail.next_merges() {
            let trained = train_on_task(&self.backbone, guard, self.trail.init_weights(), self.cfg, t)?;
            rec.train_accuracy = Some(trained.train_accuracy);
            self.trail.merge_step(&trained.weights)?;
            self.artifacts.task_adapters.push(trained.weights);
        } else {
            self.trail.advance_frozen()?;
        }
        rec.train_seconds = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let k = self.trail.snapshot_index_for_task(t);
        let tag = SubspaceTag::Merged(k);
        let classes = guard.classes(t);
        let samples = as_pairs(guard.learning_split(t, self.cfg.prototype_source.split()));
        let trail = &self.trail;
        let backbone = &self.backbone;
        let in_subspace = |j: usize| -> Result<PrototypeMatrix> {
            let snap = trail
                .snapshot(j)
                .ok_or_else(|| Error::IncompleteArtifacts(format!("snapshot {j} missing")))?;
            compute_prototypes(backbone, Some(snap), SubspaceTag::Merged(j), t, classes, &samples)
        };
        let current = in_subspace(k)?;
        self.store.insert(current.clone());

        // P_t in each older subspace, computed once per distinct snapshot.
        let mut older: BTreeMap<usize, PrototypeMatrix> = BTreeMap::new();
        let diagnostics = self.cfg.diagnostics;
        if diagnostics {
            let prev = match self.artifacts.snapshot_index.last() {
                None => None,
                Some(&j) if j == k => Some(current.clone()),
                Some(&j) => {
                    let p = in_subspace(j)?;
                    older.insert(j, p.clone());
                    Some(p)
                }
            };
            self.artifacts.previous.push(prev);
        } else {
            self.artifacts.previous.push(None);
        }
        if self.cm || diagnostics {
            for i in 1..t {
                let k_i = self.artifacts.snapshot_index[i - 1];
                if k_i == k {
                    continue;
                }
                if !older.contains_key(&k_i) {
                    older.insert(k_i, in_subspace(k_i)?);
                }
                let shift = centroid_shift(&current, &older[&k_i])?;
                if self.cm {
                    let raw = &self.artifacts.raw[i - 1];
                    self.store.insert(centroid_map(raw, &shift)?);
                }
                if diagnostics {
                    self.artifacts.cm_shifts.push((i, t, shift));
                }
            }
        }
        self.artifacts.snapshot_index.push(k);
        self.artifacts.raw.push(current);
        let task_ids: Vec<usize> = (1..=t).collect();
        let clf = build_classifier(&self.store, &task_ids, tag, !self.cm)?;
        rec.prototype_seconds = clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        let adapter = self.trail.snapshot(k).expect("snapshot exists");
        let forwards = &self.forwards;
        let predict = |x: &[f64]| -> Result<usize> {
            forwards.set(forwards.get() + 1);
            let f = backbone.forward_features(Some(adapter), x)?;
            clf.predict_class(&f)
        };
        let (acc, queries, per_query) = evaluate(guard, t, forwards, predict)?;
        rec.eval_seconds = clock.elapsed().as_secs_f64();
        rec.probe_seconds_per_query = probe_time(self.stream, self.cfg, predict)?;
        rec.accuracy = acc;
        rec.queries = queries;
        rec.forwards_per_query = per_query;
        rec.classes_seen = clf.n_classes();
        Ok(rec)
    }
}

/// ACMap with switchable initial-weight replacement and centroid mapping.
/// Tasks beyond the early-stop threshold neither train nor merge.
pub fn run_acmap(stream: &TaskStream, cfg: &RunConfig, ir: bool, cm: bool) -> Result<RunOutput> {
    cfg.validate(stream)?;
    let method = match (ir, cm) {
        (true, true) => Method::Acmap,
        (false, true) => Method::AcmapNoIr,
        (true, false) => Method::AcmapNoCm,
        (false, false) => {
            return Err(Error::Config("disabling both IR and CM is not a supported method".into()))
        }
    };
    let guard = StreamGuard::new(stream);
    let mut state = AcmapState {
        stream,
        backbone: build_backbone(&cfg.backbone)?,
        cfg,
        cm,
        trail: MergeTrail::new(cfg.initial_adapter()?, cfg.early_stop, ir)?,
        store: PrototypeStore::new(),
        artifacts: RunArtifacts {
            early_stop: cfg.early_stop,
            ..RunArtifacts::default()
        },
        forwards: Cell::new(0),
    };
    let mut report = RunReport::new(method, cfg);
    for t in 1..=stream.n_tasks() {
        guard.begin_task(t);
        match state.step(&guard, t) {
            Ok(rec) => report.push_task(rec),
            Err(e) => return Err(abort(t, e, report, &guard)),
        }
        report.merge_count = state.trail.merge_count();
        report.snapshot_count = state.trail.snapshots().len();
    }
    report.cross_task_access_count = guard.cross_task_reads();
    state.artifacts.snapshots = state.trail.snapshots().to_vec();
    Ok(RunOutput {
        report,
        artifacts: state.artifacts,
        store: state.store,
    })
}

/// Prototypes from the frozen backbone, no training.
pub fn run_simplecil(stream: &TaskStream, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate(stream)?;
    let backbone = build_backbone(&cfg.backbone)?;
    let guard = StreamGuard::new(stream);
    let mut store = PrototypeStore::new();
    let mut artifacts = RunArtifacts::default();
    let mut report = RunReport::new(Method::Simplecil, cfg);
    let forwards = Cell::new(0u64);
    for t in 1..=stream.n_tasks() {
        guard.begin_task(t);
        let mut step = || -> Result<TaskRecord> {
            let mut rec = TaskRecord::default();
            let clock = Instant::now();
            let samples = as_pairs(guard.learning_split(t, cfg.prototype_source.split()));
            let p = compute_prototypes(&backbone, None, SubspaceTag::Backbone, t, guard.classes(t), &samples)?;
            store.insert(p.clone());
            artifacts.raw.push(p);
            let ids: Vec<usize> = (1..=t).collect();
            let clf = build_classifier(&store, &ids, SubspaceTag::Backbone, false)?;
            rec.prototype_seconds = clock.elapsed().as_secs_f64();

            let clock = Instant::now();
            let predict = |x: &[f64]| -> Result<usize> {
                forwards.set(forwards.get() + 1);
                clf.predict_class(&backbone.forward_features(None, x)?)
            };
            let (acc, queries, per_query) = evaluate(&guard, t, &forwards, predict)?;
            rec.eval_seconds = clock.elapsed().as_secs_f64();
            rec.probe_seconds_per_query = probe_time(stream, cfg, predict)?;
            rec.accuracy = acc;
            rec.queries = queries;
            rec.forwards_per_query = per_query;
            rec.classes_seen = clf.n_classes();
            Ok(rec)
        };
        match step() {
            Ok(rec) => report.push_task(rec),
            Err(e) => return Err(abort(t, e, report, &guard)),
        }
    }
    report.cross_task_access_count = guard.cross_task_reads();
    Ok(RunOutput { report, artifacts, store })
}

/// Classifier over concatenated per-adapter features. Row for a class of
/// task `j` holds `P_j(θ_k)` in block `k` when `k <= j` and zeros otherwise.
fn ensemble_classifier(protos: &[Vec<PrototypeMatrix>], d: usize) -> Result<ClassifierWeights> {
    let t = protos.len();
    let mut data = Vec::new();
    let mut class_ids = Vec::new();
    for (j, per_adapter) in protos.iter().enumerate() {
        let own = &per_adapter[j];
        for (r, &c) in own.class_ids.iter().enumerate() {
            for k in 0..t {
                match per_adapter.get(k) {
                    Some(p) => data.extend_from_slice(p.rows.row(r)),
                    None => data.extend(std::iter::repeat(0.0).take(d)),
                }
            }
            class_ids.push(c);
        }
    }
    ClassifierWeights::new(Matrix::from_vec(class_ids.len(), t * d, data)?, class_ids)
}

/// Keeps every task adapter; each query runs one backbone pass per adapter.
/// Unavailable past-task prototypes in newer subspaces are zero-filled, so
/// this measures cost scaling rather than reproducing any particular
/// ensemble method's accuracy.
pub fn run_ensemble_baseline(stream: &TaskStream, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate(stream)?;
    let backbone = build_backbone(&cfg.backbone)?;
    let init = cfg.initial_adapter()?;
    let d = cfg.backbone.embed_dim;
    let guard = StreamGuard::new(stream);
    let mut adapters: Vec<AdapterWeights> = Vec::new();
    // protos[j][k] = P_{j+1}(θ_{k+1}) for k <= j.
    let mut protos: Vec<Vec<PrototypeMatrix>> = Vec::new();
    let mut report = RunReport::new(Method::Ensemble, cfg);
    report
        .notes
        .push("per-task adapter ensemble with zero-filled unavailable prototypes; a cost-scaling baseline".into());
    let forwards = Cell::new(0u64);
    for t in 1..=stream.n_tasks() {
        guard.begin_task(t);
        let mut step = || -> Result<TaskRecord> {
            let mut rec = TaskRecord::default();
            let clock = Instant::now();
            let trained = train_on_task(&backbone, &guard, &init, cfg, t)?;
            rec.train_accuracy = Some(trained.train_accuracy);
            adapters.push(trained.weights);
            rec.train_seconds = clock.elapsed().as_secs_f64();

            let clock = Instant::now();
            let samples = as_pairs(guard.learning_split(t, cfg.prototype_source.split()));
            let mine = adapters
                .iter()
                .enumerate()
                .map(|(k, a)| {
                    compute_prototypes(&backbone, Some(a), SubspaceTag::Individual(k + 1), t, guard.classes(t), &samples)
                })
                .collect::<Result<Vec<_>>>()?;
            protos.push(mine);
            let clf = ensemble_classifier(&protos, d)?;
            rec.prototype_seconds = clock.elapsed().as_secs_f64();

            let clock = Instant::now();
            let mut feature = vec![0.0; t * d];
            let predict = |x: &[f64]| -> Result<usize> {
                for (k, a) in adapters.iter().enumerate() {
                    forwards.set(forwards.get() + 1);
                    let f = backbone.forward_features(Some(a), x)?;
                    feature[k * d..(k + 1) * d].copy_from_slice(&f);
                }
                clf.predict_class(&feature)
            };
            let mut predict = predict;
            let (acc, queries, per_query) = evaluate(&guard, t, &forwards, &mut predict)?;
            rec.eval_seconds = clock.elapsed().as_secs_f64();
            rec.probe_seconds_per_query = probe_time(stream, cfg, &mut predict)?;
            rec.accuracy = acc;
            rec.queries = queries;
            rec.forwards_per_query = per_query;
            rec.classes_seen = clf.n_classes();
            Ok(rec)
        };
        match step() {
            Ok(rec) => report.push_task(rec),
            Err(e) => return Err(abort(t, e, report, &guard)),
        }
    }
    report.cross_task_access_count = guard.cross_task_reads();
    report.merge_count = 0;
    report.snapshot_count = adapters.len();
    let artifacts = RunArtifacts {
        task_adapters: adapters,
        raw: protos.into_iter().enumerate().map(|(j, mut v)| v.swap_remove(j)).collect(),
        ..RunArtifacts::default()
    };
    Ok(RunOutput {
        report,
        artifacts,
        store: PrototypeStore::new(),
    })
}

pub fn run_method(stream: &TaskStream, cfg: &RunConfig, method: Method) -> Result<RunOutput> {
    match method {
        Method::Simplecil => run_simplecil(stream, cfg),
        Method::Ensemble => run_ensemble_baseline(stream, cfg),
        m => {
            let (ir, cm) = m.acmap_flags().expect("acmap variant");
            run_acmap(stream, cfg, ir, cm)
        }
    }
}

impl ExperimentSpec {
    /// Applies the run seed to the stream and training seeds.
    pub fn resolved(method: Method, seed: u64, source: &StreamSource, run: &RunConfig) -> Self {
        let mut source = source.clone();
        match &mut source {
            StreamSource::Synthetic(spec) => spec.seed = seed,
            StreamSource::Embedding { split, .. } => split.seed = seed,
        }
        let mut run = run.clone();
        run.train.seed = seed;
        ExperimentSpec { method, seed, source, run }
    }

    pub fn build_stream(&self) -> Result<TaskStream> {
        match &self.source {
            StreamSource::Synthetic(spec) => generate_synthetic_stream(spec),
            StreamSource::Embedding { path, split } => load_embedding_stream(path, split),
        }
    }
}

/// Builds the stream and runs the method, echoing the experiment in the report.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunOutput> {
    let stream = spec.build_stream()?;
    let attach = |mut r: RunReport| {
        r.seed = spec.seed;
        r.experiment = Some(spec.clone());
        r
    };
    match run_method(&stream, &spec.run, spec.method) {
        Ok(mut out) => {
            out.report = attach(out.report);
            Ok(out)
        }
        Err(Error::Aborted { task, source, partial }) => Err(Error::Aborted {
            task,
            source,
            partial: Box::new(attach(*partial)),
        }),
        Err(e) => Err(e),
    }
}

/// Trains adapters for tasks `1..=n` in sequence, each from the shared
/// initialization (replaced by `θ_1` when `ir` is set). Used by the
/// landscape scan.
pub fn train_consecutive_adapters(
    stream: &TaskStream,
    cfg: &RunConfig,
    n: usize,
    ir: bool,
) -> Result<Vec<AdapterWeights>> {
    cfg.validate(stream)?;
    if n == 0 || n > stream.n_tasks() {
        return Err(Error::Config(format!("need 1..={} adapters, asked for {n}", stream.n_tasks())));
    }
    let backbone = build_backbone(&cfg.backbone)?;
    let guard = StreamGuard::new(stream);
    let mut init = cfg.initial_adapter()?;
    let mut out = Vec::with_capacity(n);
    for t in 1..=n {
        guard.begin_task(t);
        let theta = train_on_task(&backbone, &guard, &init, cfg, t)?.weights;
        if t == 1 && ir {
            init = theta.clone();
        }
        out.push(theta);
    }
    Ok(out)
}
