use std::path::Path;
use std::process::{Command, Output};

use acmap::harness::{RunReport, RunSummary};

const SMALL: &[&str] = &[
    "-s", "n_tasks=3",
    "-s", "inc_classes=3",
    "-s", "train_per_class=20",
    "-s", "eval_per_class=10",
    "-s", "input_dim=12",
    "-s", "signal_dim=4",
    "-s", "center_offset=5",
    "-s", "embed_dim=12",
    "-s", "hidden_dim=16",
    "-s", "bottleneck=4",
    "-s", "epochs=2",
];

fn acmap(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_acmap"));
    cmd.args(args).env_remove("ACMAP_OUT_DIR");
    if let Some(dir) = out_env {
        cmd.env("ACMAP_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

fn summaries(dir: &Path) -> Vec<RunSummary> {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_one_report_per_seed_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "-o", dir.path().to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let o = acmap(&args, None);
    assert!(o.status.success(), "{}", stderr(&o));
    let files = files_in(dir.path());
    assert_eq!(files.len(), 6, "{files:?}");
    assert!(files.contains(&"summary.json".to_string()));
    for seed in 1993..=1997 {
        assert!(files.contains(&format!("acmap_seed{seed}.json")));
    }
    let s = summaries(dir.path());
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].seeds, vec![1993, 1994, 1995, 1996, 1997]);
}

#[test]
fn batch_reports_equal_single_seed_invocations() {
    let batch = tempfile::tempdir().unwrap();
    let single = tempfile::tempdir().unwrap();
    let mut a = vec!["run", "--seeds", "4,5", "-o", batch.path().to_str().unwrap()];
    a.extend_from_slice(SMALL);
    assert!(acmap(&a, None).status.success());
    let mut b = vec!["run", "--seeds", "5", "-o", single.path().to_str().unwrap()];
    b.extend_from_slice(SMALL);
    assert!(acmap(&b, None).status.success());
    let x = RunReport::read_json(&batch.path().join("acmap_seed5.json")).unwrap();
    let y = RunReport::read_json(&single.path().join("acmap_seed5.json")).unwrap();
    assert_eq!(x.without_timing(), y.without_timing());
}

#[test]
fn out_dir_defaults_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--seeds", "1", "-m", "simplecil"];
    args.extend_from_slice(SMALL);
    let o = acmap(&args, Some(dir.path()));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(files_in(dir.path()), vec!["simplecil_seed1.json", "summary.json"]);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let mut text = String::from("# small run\nseeds = 1,2\nearly_stop = 2\n");
    for kv in SMALL.iter().filter(|a| a.contains('=')) {
        text.push_str(&format!("{kv}\n"));
    }
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    let o = acmap(
        &["run", "-c", cfg.to_str().unwrap(), "--seeds", "3", "-o", out.to_str().unwrap()],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r = RunReport::read_json(&out.join("acmap_seed3.json")).unwrap();
    assert_eq!(r.config.early_stop, acmap::merging::MergeLimit::Tasks(2));
    assert_eq!(r.snapshot_count, 2);
    assert_eq!(files_in(&out).len(), 2);
}

#[test]
fn gen_data_then_validate_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["s.acm", "s.csv"] {
        let path = dir.path().join(name);
        let mut args = vec!["gen-data", "--seed", "3", "-o", path.to_str().unwrap()];
        args.extend_from_slice(SMALL);
        let o = acmap(&args, None);
        assert!(o.status.success(), "{}", stderr(&o));
        let o = acmap(&["validate", path.to_str().unwrap(), "--inc-classes", "3"], None);
        assert!(o.status.success(), "{}", stderr(&o));
        let line = String::from_utf8_lossy(&o.stdout);
        assert!(line.starts_with("ok rows=270 dim=12 classes=9 tasks=3"), "{line}");
    }
}

#[test]
fn errors_are_single_lines_with_exit_codes() {
    let o = acmap(&["run", "--no-such-flag"], None);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert_eq!(e.trim_end().lines().count(), 1);
    assert!(e.starts_with("error kind=usage exit=2 message="), "{e}");

    let o = acmap(&["run", "-s", "early_stop=0"], None);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error kind=config exit=3"));

    let o = acmap(&["run", "-s", "unknown_key=1"], None);
    assert_eq!(o.status.code(), Some(3));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.acm");
    std::fs::write(&bad, b"ACMEMB1\0\x02\0\0\0\x01\0\0\0\0\0\0\0").unwrap();
    let o = acmap(&["validate", bad.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert_eq!(e.trim_end().lines().count(), 1);
    assert!(e.starts_with("error kind=format exit=1"), "{e}");

    let o = acmap(&["validate", dir.path().join("missing").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error kind=io"));
}

#[test]
fn divergent_run_leaves_a_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--seeds", "1", "-s", "learning_rate=1e6", "-o", dir.path().to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let o = acmap(&args, None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error kind=divergence"), "{}", stderr(&o));
    assert_eq!(files_in(dir.path()), vec!["acmap_seed1.partial.json"]);
}

#[test]
fn landscape_and_diagnose_write_their_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let mut args = vec!["landscape", "--seed", "2", "--grid", "4", "-o", d];
    args.extend_from_slice(SMALL);
    let o = acmap(&args, None);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("landscape_seed2.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10);

    let mut args = vec!["run", "--seeds", "2", "-o", d];
    args.extend_from_slice(SMALL);
    assert!(acmap(&args, None).status.success());
    let report = dir.path().join("acmap_seed2.json");
    let o = acmap(&["diagnose", "--report", report.to_str().unwrap(), "-o", d], None);
    assert!(o.status.success(), "{}", stderr(&o));
    for v in ["mapped", "unmapped", "sdc"] {
        assert!(dir.path().join(format!("acmap_seed2_alignment_{v}.csv")).exists());
    }
    let conv = std::fs::read_to_string(dir.path().join("acmap_seed2_convergence.csv")).unwrap();
    assert_eq!(conv.lines().collect::<Vec<_>>()[0], "t,cos");
    assert_eq!(conv.lines().count(), 3);
}

#[test]
fn centroid_mapping_improves_the_drifting_default() {
    let dir = tempfile::tempdir().unwrap();
    let o = acmap(&["run", "-m", "acmap,acmap_no_cm", "-o", dir.path().to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = summaries(dir.path());
    let with = s.iter().find(|s| s.method == acmap::harness::Method::Acmap).unwrap();
    let without = s.iter().find(|s| s.method == acmap::harness::Method::AcmapNoCm).unwrap();
    assert!(
        with.avg_accuracy.mean > without.avg_accuracy.mean,
        "{} vs {}",
        with.avg_accuracy.mean,
        without.avg_accuracy.mean
    );
}
