use acmap::adapter::{Schedule, TrainConfig};
use acmap::backbone::{build_backbone, BackboneConfig, Nonlinearity};
use acmap::diagnostics::{
    all_alignment_curves, diagnose_experiment, export, import_json, landscape_experiment, merge_convergence_curve,
    AlignmentVariant, ExportFormat, Exportable,
};
use acmap::harness::*;
use acmap::merging::{LandscapeGrid, MergeLimit};

fn spec(n_tasks: usize, seed: u64) -> StreamSpec {
    StreamSpec {
        n_tasks,
        base_classes: 0,
        inc_classes: 3,
        train_per_class: 20,
        val_per_class: 4,
        eval_per_class: 10,
        input_dim: 12,
        cluster_separation: 4.0,
        noise_sigma: 0.3,
        signal_dim: 4,
        nuisance_sigma: 0.5,
        center_offset: 5.0,
        drift: DriftModel::Rotation { angle: 0.5 },
        seed,
    }
}

fn config(early_stop: MergeLimit) -> RunConfig {
    RunConfig {
        backbone: BackboneConfig {
            input_dim: 12,
            embed_dim: 12,
            n_blocks: 2,
            hidden_dim: 16,
            nonlinearity: Nonlinearity::Relu,
            seed: 7,
        },
        adapter: AdapterConfig {
            bottleneck: 4,
            scale: 1.0,
        },
        train: TrainConfig {
            learning_rate: 0.03,
            weight_decay: 5e-4,
            epochs: 3,
            batch_size: 16,
            schedule: Schedule::CosineAnnealing,
            dropout: 0.0,
            seed: 1,
        },
        early_stop,
        prototype_source: PrototypeSource::Train,
        probe_queries: 0,
        probe_repeats: 1,
        diagnostics: false,
    }
}

fn experiment(method: Method, n_tasks: usize, early_stop: MergeLimit, seed: u64) -> ExperimentSpec {
    ExperimentSpec::resolved(
        method,
        seed,
        &StreamSource::Synthetic(spec(n_tasks, seed)),
        &config(early_stop),
    )
}

#[test]
fn single_task_average_equals_first_accuracy() {
    for m in Method::ALL {
        let r = run_experiment(&experiment(m, 1, MergeLimit::Unbounded, 3)).unwrap().report;
        assert_eq!(r.avg_accuracy, r.per_task_accuracy[0]);
        assert_eq!(r.final_accuracy, r.per_task_accuracy[0]);
    }
}

#[test]
fn same_config_and_seed_reproduce_bitwise() {
    for m in Method::ALL {
        let e = experiment(m, 3, MergeLimit::Tasks(2), 11);
        let a = run_experiment(&e).unwrap().report;
        let b = run_experiment(&e).unwrap().report;
        assert_eq!(a.without_timing(), b.without_timing(), "{m}");
        assert_eq!(a.without_timing().to_json().unwrap(), b.without_timing().to_json().unwrap());
    }
}

#[test]
fn different_seeds_differ() {
    let a = run_experiment(&experiment(Method::Acmap, 2, MergeLimit::Unbounded, 1)).unwrap();
    let b = run_experiment(&experiment(Method::Acmap, 2, MergeLimit::Unbounded, 2)).unwrap();
    assert_ne!(a.artifacts.snapshots, b.artifacts.snapshots);
}

#[test]
fn ensemble_matches_acmap_on_the_first_task() {
    let a = run_experiment(&experiment(Method::Acmap, 2, MergeLimit::Unbounded, 5)).unwrap();
    let e = run_experiment(&experiment(Method::Ensemble, 2, MergeLimit::Unbounded, 5)).unwrap();
    assert_eq!(a.report.per_task_accuracy[0], e.report.per_task_accuracy[0]);
    assert_eq!(a.artifacts.task_adapters[0], e.artifacts.task_adapters[0]);
}

#[test]
fn forward_passes_and_cumulative_evaluation() {
    let n = 4;
    for m in Method::ALL {
        let r = run_experiment(&experiment(m, n, MergeLimit::Unbounded, 2)).unwrap().report;
        let expected: Vec<u64> = match m {
            Method::Ensemble => (1..=n as u64).collect(),
            _ => vec![1; n],
        };
        assert_eq!(r.forward_passes_per_query, expected, "{m}");
        assert_eq!(r.classes_seen, vec![3, 6, 9, 12]);
        assert_eq!(r.eval_queries, vec![30, 60, 90, 120]);
        assert_eq!(r.cross_task_access_count, 0, "{m}");
    }
}

#[test]
fn merge_and_snapshot_counts_follow_the_threshold() {
    let r = run_experiment(&experiment(Method::Acmap, 4, MergeLimit::Tasks(2), 2)).unwrap();
    assert_eq!(r.report.merge_count, 4);
    assert_eq!(r.report.snapshot_count, 2);
    assert_eq!(r.artifacts.snapshot_index, vec![1, 2, 2, 2]);
    assert_eq!(r.artifacts.task_adapters.len(), 2);
    assert_eq!(r.report.train_accuracy.iter().filter(|a| a.is_some()).count(), 2);
}

#[test]
fn recording_diagnostics_does_not_change_the_run() {
    let e = experiment(Method::Acmap, 3, MergeLimit::Unbounded, 4);
    let mut d = e.clone();
    d.run.diagnostics = true;
    let plain = run_experiment(&e).unwrap().report;
    let recorded = run_experiment(&d).unwrap().report;
    assert_eq!(plain.per_task_accuracy, recorded.per_task_accuracy);
    assert_eq!(recorded.cross_task_access_count, 0);
}

#[test]
fn alignment_is_exact_at_the_anchor_task() {
    let mut e = experiment(Method::Acmap, 4, MergeLimit::Unbounded, 6);
    e.run.diagnostics = true;
    let stream = e.build_stream().unwrap();
    let out = run_experiment(&e).unwrap();
    let bb = build_backbone(&e.run.backbone).unwrap();
    for v in AlignmentVariant::ALL {
        let curves = all_alignment_curves(&bb, &stream, &out.artifacts, v, Split::Train).unwrap();
        assert_eq!(curves.len(), 4);
        for c in &curves {
            assert_eq!(c.ts[0], c.anchor_task);
            for per_class in &c.per_class {
                assert!((per_class[0] - 1.0).abs() <= 1e-12, "{v} anchor {}", c.anchor_task);
            }
        }
    }
}

#[test]
fn convergence_is_one_once_frozen() {
    let mut e = experiment(Method::Acmap, 5, MergeLimit::Tasks(2), 6);
    e.run.diagnostics = true;
    let out = run_experiment(&e).unwrap();
    let c = merge_convergence_curve(&out.artifacts).unwrap();
    assert_eq!(c.ts, vec![2, 3, 4, 5]);
    assert!(c.values[0] < 1.0);
    for v in &c.values[1..] {
        assert_eq!(*v, 1.0);
    }
}

#[test]
fn diagnose_needs_an_acmap_variant() {
    let e = experiment(Method::Simplecil, 2, MergeLimit::Unbounded, 1);
    assert!(matches!(diagnose_experiment(&e, Split::Train), Err(acmap::Error::Config(_))));
    let e = experiment(Method::AcmapNoCm, 3, MergeLimit::Unbounded, 1);
    let d = diagnose_experiment(&e, Split::Val).unwrap();
    assert_eq!(d.alignment.len(), 9);
    assert_eq!(d.convergence.unwrap().values.len(), 2);
}

#[test]
fn reports_and_curves_export_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let e = experiment(Method::Acmap, 3, MergeLimit::Unbounded, 8);
    let out = run_experiment(&e).unwrap();
    let path = dir.path().join("r.json");
    export(Exportable::Report(&out.report), &path, ExportFormat::Json).unwrap();
    let back = RunReport::read_json(&path).unwrap();
    assert_eq!(back, out.report);
    assert_eq!(back.experiment.as_ref(), Some(&e));
    let again = run_experiment(back.experiment.as_ref().unwrap()).unwrap().report;
    assert_eq!(again.without_timing(), out.report.without_timing());

    let csv = dir.path().join("r.csv");
    export(Exportable::Report(&out.report), &csv, ExportFormat::Csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    for (line, acc) in text.lines().skip(1).zip(&out.report.per_task_accuracy) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, *acc);
    }

    let d = diagnose_experiment(&e, Split::Train).unwrap();
    let conv = d.convergence.clone().unwrap();
    let cpath = dir.path().join("c.json");
    export(Exportable::Convergence(&conv), &cpath, ExportFormat::Json).unwrap();
    assert_eq!(import_json::<acmap::diagnostics::ConvergenceSeries>(&cpath).unwrap(), conv);
    let apath = dir.path().join("a.csv");
    export(Exportable::Alignment(&d.alignment), &apath, ExportFormat::Csv).unwrap();
    let text = std::fs::read_to_string(&apath).unwrap();
    assert_eq!(text.lines().next().unwrap(), "anchor_task,class_id,t,variant,cos");
    // Per class points plus one mean row per (anchor, t), for every variant.
    let points: usize = (1..=3).map(|i| 4 - i).sum();
    assert_eq!(text.lines().count() - 1, 3 * points * (3 + 1));
}

#[test]
fn landscape_grid_matches_the_lattice_and_vertices() {
    let e = experiment(Method::Acmap, 3, MergeLimit::Unbounded, 9);
    let res = landscape_experiment(&e, 5, true).unwrap();
    assert_eq!(res.grid.points.len(), LandscapeGrid::valid_point_count(5));
    assert_eq!(res.grid.to_csv().lines().count(), 16);
    assert_eq!(res.grid.at(4, 0), Some(res.standalone_errors[0]));
    assert_eq!(res.grid.at(0, 4), Some(res.standalone_errors[1]));
    assert_eq!(res.grid.at(0, 0), Some(res.standalone_errors[2]));
    let short = experiment(Method::Acmap, 2, MergeLimit::Unbounded, 9);
    assert!(landscape_experiment(&short, 5, true).is_err());
}

#[test]
fn embedding_round_trip_drives_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let stream = generate_synthetic_stream(&spec(2, 4)).unwrap();
    let path = dir.path().join("s.acm");
    write_embedding_file(&path, &stream_to_table(&stream)).unwrap();
    let split = SplitSpec {
        base_classes: 3,
        inc_classes: 3,
        eval_fraction: 0.3,
        val_fraction: 0.0,
        seed: 4,
    };
    let e = ExperimentSpec::resolved(
        Method::Acmap,
        4,
        &StreamSource::Embedding { path, split },
        &config(MergeLimit::Unbounded),
    );
    let r = run_experiment(&e).unwrap().report;
    assert_eq!(r.classes_seen, vec![3, 6]);
    assert_eq!(r.cross_task_access_count, 0);
}

#[test]
fn invalid_configuration_is_rejected_before_running() {
    let mut e = experiment(Method::Acmap, 2, MergeLimit::Unbounded, 1);
    e.run.backbone.input_dim = 5;
    assert!(matches!(run_experiment(&e), Err(acmap::Error::Config(_))));
    let stream = generate_synthetic_stream(&spec(2, 1)).unwrap();
    assert!(matches!(run_acmap(&stream, &config(MergeLimit::Unbounded), false, false), Err(acmap::Error::Config(_))));
}

#[test]
fn divergence_aborts_with_a_partial_report() {
    let mut e = experiment(Method::Acmap, 3, MergeLimit::Unbounded, 1);
    e.run.train.learning_rate = 1e6;
    match run_experiment(&e) {
        Err(acmap::Error::Aborted { task, partial, .. }) => {
            assert_eq!(partial.n_tasks(), task - 1);
            assert_eq!(partial.seed, 1);
            assert!(partial.experiment.is_some());
        }
        other => panic!("expected abort, got {:?}", other.map(|o| o.report.per_task_accuracy)),
    }
}
