//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Pass criterion numbers as arguments to run a subset.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use acmap::adapter::{adapter_grad_check, init_adapter, AdapterWeights, LabeledBatch, TaskHead};
use acmap::backbone::build_backbone;
use acmap::classifier::ClassifierWeights;
use acmap::config::{reference_config, ResolvedConfig};
use acmap::diagnostics::{diagnose_experiment, landscape_experiment, mean_offdiagonal_alignment, AlignmentVariant};
use acmap::harness::{
    compute_metrics, generate_synthetic_stream, run_experiment, run_method, DriftModel, ExperimentSpec, Method,
    RunConfig, Split, StreamSource, StreamSpec,
};
use acmap::merging::{LandscapeGrid, MergeLimit, MergeTrail};
use acmap::numerics::{cosine_sim, Matrix};
use acmap::prototype::{centroid_map, centroid_shift, prototypes_from_features, sdc_map, SubspaceTag};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    check: fn() -> Outcome,
}

const SEEDS: [u64; 5] = [1993, 1994, 1995, 1996, 1997];

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn reference() -> ResolvedConfig {
    reference_config()
}

fn reference_spec() -> StreamSpec {
    match reference().source {
        StreamSource::Synthetic(s) => s,
        StreamSource::Embedding { .. } => unreachable!("reference is synthetic"),
    }
}

fn experiment(method: Method, seed: u64, spec: &StreamSpec, run: &RunConfig) -> ExperimentSpec {
    ExperimentSpec::resolved(method, seed, &StreamSource::Synthetic(spec.clone()), run)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn random_adapter(rng: &mut ChaCha8Rng) -> AdapterWeights {
    let mut a = init_adapter(3, 16, 4, 1.0, None, rng.gen()).unwrap();
    for b in a.blocks_mut() {
        b.up = Matrix::gaussian(4, 16, 1.0, rng);
        b.down = Matrix::gaussian(16, 4, 1.0, rng);
    }
    a
}

fn running_average_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let adapters: Vec<AdapterWeights> = (0..20).map(|_| random_adapter(&mut rng)).collect();
    let mut trail = MergeTrail::new(adapters[0].clone(), MergeLimit::Unbounded, true).unwrap();
    for a in &adapters {
        trail.merge_step(a).unwrap();
    }
    let merged: Vec<f64> = trail.current().unwrap().matrices().flat_map(|m| m.data().to_vec()).collect();
    let flat: Vec<Vec<f64>> = adapters
        .iter()
        .map(|a| a.matrices().flat_map(|m| m.data().to_vec()).collect())
        .collect();
    let mut worst = 0.0f64;
    for (k, m) in merged.iter().enumerate() {
        let batch = flat.iter().map(|f| f[k]).sum::<f64>() / 20.0;
        worst = worst.max((m - batch).abs());
    }
    ensure(worst <= 1e-10, format!("max |running - batch| = {worst:.3e} over {} entries", merged.len()))
}

fn gradient_correctness() -> Outcome {
    let cfg = reference();
    let stream = generate_synthetic_stream(&reference_spec()).unwrap();
    let bb = build_backbone(&cfg.run.backbone).unwrap();
    let mut worst = 0.0f64;
    let (mut compared, mut excluded) = (0, 0);
    for seed in 0..3u64 {
        let task = stream.task(1 + seed as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<usize> = (0..6).map(|_| rng.gen_range(0..task.train.len())).collect();
        let inputs: Vec<&[f64]> = picks.iter().map(|&i| &task.train[i].x[..]).collect();
        let labels: Vec<usize> = picks.iter().map(|&i| task.train[i].y).collect();
        let batch = LabeledBatch::from_global(inputs, &labels).unwrap();
        let mut adapter = init_adapter(2, 32, 8, 1.0, None, seed).unwrap();
        for b in adapter.blocks_mut() {
            b.up = Matrix::gaussian(8, 32, 0.1, &mut rng);
        }
        let head = TaskHead::gaussian(32, batch.n_classes, seed + 10);
        let rep = adapter_grad_check(&bb, &adapter, &head, &batch).unwrap();
        worst = worst.max(rep.max_rel_error);
        compared += rep.compared;
        excluded += rep.excluded;
    }
    ensure(
        worst <= 1e-4,
        format!("max rel error {worst:.3e} over {compared} entries on 3 batches, {excluded} ReLU-kink entries excluded"),
    )
}

fn centroid_mapping_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 16;
    let delta: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut worst = 0.0f64;
    for trial in 0..20 {
        // Task 1 (old) and task 2 (current) features in subspace A; subspace
        // B adds the same offset to every feature.
        let mut feats = |task: usize, n: usize| -> Vec<(Vec<f64>, usize)> {
            (0..n)
                .map(|i| {
                    let c = 3 * task + i % 3;
                    ((0..d).map(|_| rng.gen_range(-5.0..5.0)).collect(), c)
                })
                .collect()
        };
        let old = feats(0, 60);
        let cur = feats(1, 60);
        let shifted = |s: &[(Vec<f64>, usize)]| -> Vec<(Vec<f64>, usize)> {
            s.iter()
                .map(|(f, c)| (f.iter().zip(&delta).map(|(a, b)| a + b).collect(), *c))
                .collect()
        };
        let protos = |s: &[(Vec<f64>, usize)], task: usize, tag: SubspaceTag| {
            let classes: Vec<usize> = (3 * task..3 * task + 3).collect();
            prototypes_from_features(task, tag, &classes, d, s.iter().map(|(f, c)| (&f[..], *c))).unwrap()
        };
        let (a, b) = (SubspaceTag::Merged(1), SubspaceTag::Merged(2));
        let p_old_a = protos(&old, 0, a);
        let p_old_b_true = protos(&shifted(&old), 0, b);
        let shift = centroid_shift(&protos(&shifted(&cur), 1, b), &protos(&cur, 1, a)).unwrap();
        let mapped = centroid_map(&p_old_a, &shift).unwrap();
        let err = mapped.rows.max_abs_diff(&p_old_b_true.rows).unwrap();
        worst = worst.max(err);
        if mapped.tag != b {
            return Err(format!("trial {trial}: mapped tag {} != {b}", mapped.tag));
        }
    }
    ensure(worst <= 1e-9, format!("max abs error {worst:.3e} over 20 constructed offsets"))
}

fn ablation_direction() -> Outcome {
    let cfg = reference();
    let spec = reference_spec();
    let mut finals = Vec::new();
    for m in [Method::Acmap, Method::AcmapNoCm, Method::AcmapNoIr] {
        let v: Vec<f64> = SEEDS
            .iter()
            .map(|&s| run_experiment(&experiment(m, s, &spec, &cfg.run)).unwrap().report.final_accuracy)
            .collect();
        finals.push(mean(&v));
    }
    let [full, no_cm, no_ir] = [finals[0], finals[1], finals[2]];
    ensure(
        full > no_cm && full > no_ir,
        format!("mean A_T: acmap {full:.4}, no CM {no_cm:.4}, no IR {no_ir:.4}"),
    )
}

fn early_stop_parity() -> Outcome {
    let cfg = reference();
    let mut spec = reference_spec();
    spec.n_tasks = 20;
    let mut gaps = Vec::new();
    for &seed in &SEEDS {
        let mut limited = cfg.run.clone();
        limited.early_stop = MergeLimit::Tasks(10);
        let mut open = cfg.run.clone();
        open.early_stop = MergeLimit::Unbounded;
        let a = run_experiment(&experiment(Method::Acmap, seed, &spec, &limited)).unwrap();
        let b = run_experiment(&experiment(Method::Acmap, seed, &spec, &open)).unwrap();
        if a.artifacts.snapshots.len() != 10 || a.artifacts.snapshot_index[10..].iter().any(|&k| k != 10) {
            return Err(format!("seed {seed}: merging did not stop at 10"));
        }
        let bitwise = a.artifacts.snapshots[..]
            .iter()
            .zip(&b.artifacts.snapshots[..10])
            .all(|(x, y)| x.checksum() == y.checksum() && x == y);
        if !bitwise || a.artifacts.task_adapters.len() != 10 {
            return Err(format!("seed {seed}: snapshots after task 10 are not frozen copies"));
        }
        gaps.push(a.report.avg_accuracy - b.report.avg_accuracy);
    }
    let gap = mean(&gaps) * 100.0;
    ensure(
        gap.abs() <= 1.0,
        format!("mean Ā(L=10) - Ā(L=inf) = {gap:+.3} points; snapshots frozen after task 10"),
    )
}

fn inference_structure() -> Outcome {
    let cfg = reference();
    let spec = StreamSpec {
        n_tasks: 40,
        train_per_class: 8,
        eval_per_class: 4,
        drift: DriftModel::None,
        ..reference_spec()
    };
    let mut run = cfg.run.clone();
    run.backbone.embed_dim = 64;
    run.backbone.hidden_dim = 256;
    run.backbone.n_blocks = 4;
    run.train.epochs = 1;
    run.train.batch_size = 40;
    run.probe_queries = 100;
    run.probe_repeats = 5;
    let stream = generate_synthetic_stream(&StreamSpec { seed: 1993, ..spec }).unwrap();
    let run = RunConfig {
        train: acmap::adapter::TrainConfig { seed: 1993, ..run.train.clone() },
        ..run
    };
    let a = run_method(&stream, &run, Method::Acmap).unwrap().report;
    let e = run_method(&stream, &run, Method::Ensemble).unwrap().report;
    for t in 0..40 {
        let (fa, fe) = (a.forward_passes_per_query[t], e.forward_passes_per_query[t]);
        if fa != 1 || fe != t as u64 + 1 {
            return Err(format!("t={}: forward passes acmap {fa}, ensemble {fe}", t + 1));
        }
    }
    let ratio = e.forward_passes_per_query[39] / a.forward_passes_per_query[39];
    let pa = &a.timing.probe_seconds_per_query;
    let pe = &e.timing.probe_seconds_per_query;
    let flat = pa.iter().all(|&p| p <= 2.0 * pa[0]);
    let worst_flat = pa.iter().fold(0.0f64, |m, &p| m.max(p / pa[0]));
    let drops: Vec<usize> = (1..40).filter(|&t| pe[t] <= pe[t - 1]).map(|t| t + 1).collect();
    ensure(
        ratio == 40 && flat && drops.is_empty(),
        format!(
            "forward ratio at t=40 = {ratio}; acmap probe max/t1 = {worst_flat:.2}; ensemble probe {:.1} -> {:.1} us/query, non-increasing steps at t={drops:?}",
            pe[0] * 1e6,
            pe[39] * 1e6
        ),
    )
}

fn classifier_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let trials = 2000;
    for trial in 0..trials {
        let (c, d) = (rng.gen_range(2..12), rng.gen_range(2..24));
        let w = Matrix::gaussian(c, d, rng.gen_range(0.1..5.0), &mut rng);
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let ids: Vec<usize> = (0..c).collect();
        let base = ClassifierWeights::new(w.clone(), ids.clone()).unwrap().predict_class(&q).unwrap();
        let mut scaled = w;
        for r in 0..c {
            let s = 10f64.powf(rng.gen_range(-3.0..3.0));
            scaled.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        let k = 10f64.powf(rng.gen_range(-3.0..3.0));
        let q2: Vec<f64> = q.iter().map(|v| v * k).collect();
        let after = ClassifierWeights::new(scaled, ids).unwrap().predict_class(&q2).unwrap();
        if after != base {
            return Err(format!("trial {trial}: argmax {base} became {after}"));
        }
    }
    Ok(format!("{trials} randomized trials, argmax unchanged"))
}

/// Features of one sample in subspace `k`: the input, plus the cumulative
/// drift `D_k`, plus noise private to this sample and subspace.
fn noisy_feature(x: &[f64], drift: &[f64], seed: u64, sample: u64, k: u64, sigma: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (sample << 20) ^ (k << 48));
    x.iter()
        .zip(drift)
        .map(|(a, b)| a + b + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

/// Mean off-diagonal cosine for CM and SDC on a 10-step stream whose
/// per-step drifts are random and whose subspaces carry private noise.
fn noisy_stream_alignment(seed: u64) -> (f64, f64) {
    let (tasks, per_task, per_class, d) = (10usize, 5usize, 60usize, 32usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut drifts = vec![vec![0.0; d]];
    for _ in 1..tasks {
        let last = drifts.last().unwrap().clone();
        drifts.push(last.iter().map(|v| v + rng.gen_range(-0.4..0.4)).collect());
    }
    // Per task: (sample id, input, class) for the training and eval halves.
    let mut data = Vec::new();
    let mut next_id = 0u64;
    for t in 0..tasks {
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for c in t * per_task..(t + 1) * per_task {
            let mean: Vec<f64> = center.iter().map(|m| m + rng.gen_range(-2.0..2.0)).collect();
            for n in 0..2 * per_class {
                let x: Vec<f64> = mean.iter().map(|m| m + 0.5 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
                next_id += 1;
                if n < per_class { &mut train } else { &mut eval }.push((next_id, x, c));
            }
        }
        data.push((train, eval));
    }
    let protos = |task: usize, k: usize, eval: bool| {
        let set = if eval { &data[task].1 } else { &data[task].0 };
        let feats: Vec<(Vec<f64>, usize)> = set
            .iter()
            .map(|(id, x, c)| (noisy_feature(x, &drifts[k], seed, *id, k as u64, 0.6), *c))
            .collect();
        let classes: Vec<usize> = (task * per_task..(task + 1) * per_task).collect();
        prototypes_from_features(task + 1, SubspaceTag::Merged(k + 1), &classes, d, feats.iter().map(|(f, c)| (&f[..], *c)))
            .unwrap()
    };
    let (mut cm, mut sdc) = (Vec::new(), Vec::new());
    for i in 0..tasks {
        let raw = protos(i, i, false);
        for t in i + 1..tasks {
            let truth = protos(i, t, true);
            let shift = centroid_shift(&protos(t, t, false), &protos(t, i, false)).unwrap();
            let steps: Vec<_> = (i + 1..=t)
                .map(|j| centroid_shift(&protos(j, j, false), &protos(j, j - 1, false)).unwrap())
                .collect();
            let mapped_cm = centroid_map(&raw, &shift).unwrap();
            let mapped_sdc = sdc_map(&raw, &steps).unwrap();
            for r in 0..per_task {
                cm.push(cosine_sim(mapped_cm.rows.row(r), truth.rows.row(r)).unwrap());
                sdc.push(cosine_sim(mapped_sdc.rows.row(r), truth.rows.row(r)).unwrap());
            }
        }
    }
    (mean(&cm), mean(&sdc))
}

fn cm_versus_sdc() -> Outcome {
    let (mut cm, mut sdc) = (Vec::new(), Vec::new());
    for &seed in &SEEDS {
        let (a, b) = noisy_stream_alignment(seed);
        cm.push(a);
        sdc.push(b);
    }
    // End-to-end reference run, reported for context.
    let cfg = reference();
    let (mut run_cm, mut run_sdc) = (Vec::new(), Vec::new());
    for &seed in &SEEDS {
        let d = diagnose_experiment(&experiment(Method::Acmap, seed, &reference_spec(), &cfg.run), Split::Eval).unwrap();
        run_cm.push(mean_offdiagonal_alignment(&d.variant(AlignmentVariant::Mapped)).unwrap());
        run_sdc.push(mean_offdiagonal_alignment(&d.variant(AlignmentVariant::Sdc)).unwrap());
    }
    let (a, b) = (mean(&cm), mean(&sdc));
    ensure(
        a >= b,
        format!(
            "noisy 10-step stream mean cos: CM {a:.5}, SDC {b:.5}; reference run (eval truth): CM {:.5}, SDC {:.5}",
            mean(&run_cm),
            mean(&run_sdc)
        ),
    )
}

fn landscape_vertices() -> Outcome {
    let cfg = reference();
    let e = experiment(Method::Acmap, SEEDS[0], &reference_spec(), &cfg.run);
    let g = 11;
    let res = landscape_experiment(&e, g, true).unwrap();
    let lattice: usize = (0..g).map(|k| g - k).sum();
    let rows = res.grid.to_csv().lines().count() - 1;
    let vertices = [
        res.grid.at(g - 1, 0),
        res.grid.at(0, g - 1),
        res.grid.at(0, 0),
    ];
    let exact = vertices
        .iter()
        .zip(res.standalone_errors)
        .all(|(v, s)| v.map(f64::to_bits) == Some(s.to_bits()));
    ensure(
        exact && rows == lattice && rows == LandscapeGrid::valid_point_count(g),
        format!(
            "vertices {:?} vs standalone {:?}; {rows} rows, lattice {lattice}; min error {:.4}",
            vertices.map(|v| v.unwrap_or(f64::NAN)),
            res.standalone_errors,
            res.grid.min_error()
        ),
    )
}

/// Exact summation by error-free transformations (Shewchuk partials).
fn exact_sum(values: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &x in values {
        let mut x = x;
        let mut kept = Vec::new();
        for &y in &partials {
            let (hi, lo) = if x.abs() < y.abs() { (y, x) } else { (x, y) };
            let s = hi + lo;
            let err = lo - (s - hi);
            if err != 0.0 {
                kept.push(err);
            }
            x = s;
        }
        kept.push(x);
        partials = kept;
    }
    partials.iter().sum()
}

fn metric_identities() -> Outcome {
    let (avg, last) = compute_metrics(&[0.8, 0.6]).unwrap();
    if avg != 0.7 || last != 0.6 {
        return Err(format!("[0.8, 0.6] gave ({avg}, {last})"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..200);
        let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let (avg, last) = compute_metrics(&v).unwrap();
        if last != v[n - 1] {
            return Err("A_T is not the last entry".into());
        }
        worst = worst.max((avg - exact_sum(&v) / n as f64).abs());
    }
    ensure(worst <= 1e-15, format!("(0.7, 0.6) exact; max deviation from exact-sum oracle {worst:.2e} over 1000 inputs"))
}

fn determinism_and_contract() -> Outcome {
    let cfg = reference();
    let spec = reference_spec();
    let mut notes = Vec::new();
    for m in Method::ALL {
        let e = experiment(m, SEEDS[0], &spec, &cfg.run);
        let a = run_experiment(&e).unwrap().report;
        let b = run_experiment(&e).unwrap().report;
        let (ja, jb) = (a.without_timing().to_json().unwrap(), b.without_timing().to_json().unwrap());
        if ja != jb {
            return Err(format!("{m}: reports differ"));
        }
        if a.cross_task_access_count != 0 {
            return Err(format!("{m}: {} cross-task reads", a.cross_task_access_count));
        }
        notes.push(m.as_str());
    }
    Ok(format!("bitwise-identical reports and zero cross-task reads for {}", notes.join(", ")))
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "running-average identity", limit: Duration::from_secs(1), check: running_average_identity },
        Criterion { id: 2, name: "gradient correctness", limit: Duration::from_secs(10), check: gradient_correctness },
        Criterion { id: 3, name: "centroid-mapping exactness", limit: Duration::from_secs(1), check: centroid_mapping_exactness },
        Criterion { id: 4, name: "ablation direction", limit: Duration::from_secs(300), check: ablation_direction },
        Criterion { id: 5, name: "early-stop parity", limit: Duration::from_secs(600), check: early_stop_parity },
        Criterion { id: 6, name: "O(1)/O(T) inference structure", limit: Duration::from_secs(900), check: inference_structure },
        Criterion { id: 7, name: "classifier invariance", limit: Duration::from_secs(5), check: classifier_invariance },
        Criterion { id: 8, name: "CM vs SDC", limit: Duration::from_secs(300), check: cm_versus_sdc },
        Criterion { id: 9, name: "landscape scan", limit: Duration::from_secs(300), check: landscape_vertices },
        Criterion { id: 10, name: "metric identities", limit: Duration::from_secs(5), check: metric_identities },
        Criterion { id: 11, name: "determinism and exemplar-free contract", limit: Duration::from_secs(300), check: determinism_and_contract },
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.check).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took <= c.limit => (true, d),
            Ok(d) => (false, format!("{d}; took longer than {:?}", c.limit)),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} [{:>2}] {} ({:.2}s): {}",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            took.as_secs_f64(),
            detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
