//! Directional behaviour of the reference configuration across seeds.

use acmap::config::reference_config;
use acmap::diagnostics::{diagnose_experiment, landscape_experiment, mean_offdiagonal_alignment, AlignmentVariant};
use acmap::harness::{run_experiment, DriftModel, ExperimentSpec, Method, Split, StreamSource, StreamSpec};

const SEEDS: [u64; 5] = [1993, 1994, 1995, 1996, 1997];

fn reference_stream() -> StreamSpec {
    match reference_config().source {
        StreamSource::Synthetic(s) => s,
        StreamSource::Embedding { .. } => unreachable!(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn mapped_prototypes_align_better_than_unmapped() {
    let cfg = reference_config();
    let (mut mapped, mut unmapped) = (Vec::new(), Vec::new());
    for &seed in &SEEDS {
        let e = ExperimentSpec::resolved(Method::Acmap, seed, &StreamSource::Synthetic(reference_stream()), &cfg.run);
        let d = diagnose_experiment(&e, Split::Eval).unwrap();
        mapped.push(mean_offdiagonal_alignment(&d.variant(AlignmentVariant::Mapped)).unwrap());
        unmapped.push(mean_offdiagonal_alignment(&d.variant(AlignmentVariant::Unmapped)).unwrap());
    }
    assert!(mean(&mapped) >= mean(&unmapped), "{mapped:?} vs {unmapped:?}");
}

#[test]
fn merged_adapter_converges_over_twenty_tasks() {
    let cfg = reference_config();
    let stream = StreamSpec { n_tasks: 20, ..reference_stream() };
    for &seed in &SEEDS {
        let e = ExperimentSpec::resolved(Method::Acmap, seed, &StreamSource::Synthetic(stream.clone()), &cfg.run);
        let c = diagnose_experiment(&e, Split::Train).unwrap().convergence.unwrap();
        let n = c.values.len();
        let (first, last) = (mean(&c.values[..5]), mean(&c.values[n - 5..]));
        assert!(last > first, "seed {seed}: {first} -> {last}");
    }
}

/// Well-separated isotropic clusters without drift.
fn separable_stream(n_tasks: usize) -> StreamSpec {
    StreamSpec {
        n_tasks,
        cluster_separation: 6.0,
        signal_dim: 0,
        nuisance_sigma: 0.0,
        center_offset: 0.0,
        drift: DriftModel::None,
        ..reference_stream()
    }
}

#[test]
fn drift_free_stream_is_learned_almost_perfectly() {
    let mut cfg = reference_config();
    cfg.run.train.epochs = 5;
    let stream = separable_stream(5);
    for m in [Method::Acmap, Method::Simplecil] {
        let e = ExperimentSpec::resolved(m, SEEDS[0], &StreamSource::Synthetic(stream.clone()), &cfg.run);
        let r = run_experiment(&e).unwrap().report;
        assert!(r.final_accuracy >= 0.95, "{m}: {}", r.final_accuracy);
    }
}

#[test]
fn averaging_does_not_hurt_on_a_drift_free_landscape() {
    let cfg = reference_config();
    let e = ExperimentSpec::resolved(Method::Acmap, SEEDS[0], &StreamSource::Synthetic(separable_stream(3)), &cfg.run);
    let res = landscape_experiment(&e, 11, true).unwrap();
    let min = res.grid.min_error();
    for v in res.standalone_errors {
        assert!(min <= v, "{min} > {v}");
    }
}
