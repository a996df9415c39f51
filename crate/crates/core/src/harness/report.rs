//! Run reports, metrics and configuration echo.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::TrainConfig;
use crate::backbone::BackboneConfig;
use crate::diagnostics::{fmt_f64, write_atomic};
use crate::error::{Error, Result};
use crate::merging::MergeLimit;
use crate::numerics::CompensatedSum;

use super::stream::{PrototypeSource, SplitSpec, StreamSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Acmap,
    AcmapNoIr,
    AcmapNoCm,
    Simplecil,
    Ensemble,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Acmap,
        Method::AcmapNoIr,
        Method::AcmapNoCm,
        Method::Simplecil,
        Method::Ensemble,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Acmap => "acmap",
            Method::AcmapNoIr => "acmap_no_ir",
            Method::AcmapNoCm => "acmap_no_cm",
            Method::Simplecil => "simplecil",
            Method::Ensemble => "ensemble",
        }
    }

    /// `(ir, cm)` for the ACMap variants.
    pub fn acmap_flags(self) -> Option<(bool, bool)> {
        match self {
            Method::Acmap => Some((true, true)),
            Method::AcmapNoIr => Some((false, true)),
            Method::AcmapNoCm => Some((true, false)),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub bottleneck: usize,
    pub scale: f64,
}

/// Everything a method needs besides the stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub early_stop: MergeLimit,
    pub prototype_source: PrototypeSource,
    /// Size of the fixed query set timed after each task (0 disables).
    pub probe_queries: usize,
    /// Timing repeats; the minimum is reported.
    pub probe_repeats: usize,
    /// Record per-step prototypes and shifts for the diagnostics module.
    pub diagnostics: bool,
}

/// Where a run's stream comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamSource {
    Synthetic(StreamSpec),
    Embedding { path: PathBuf, split: SplitSpec },
}

/// Fully resolved description of one seeded run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub method: Method,
    pub seed: u64,
    pub source: StreamSource,
    pub run: RunConfig,
}

/// Monotonic-clock durations per task, in seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub train_seconds: Vec<f64>,
    pub prototype_seconds: Vec<f64>,
    pub eval_seconds: Vec<f64>,
    /// Minimum over repeats of the fixed probe set's time, per query.
    pub probe_seconds_per_query: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    /// Resolved configuration; enough to reproduce the run.
    pub experiment: Option<ExperimentSpec>,
    pub config: RunConfig,
    /// Top-1 accuracy on the cumulative eval set after each task.
    pub per_task_accuracy: Vec<f64>,
    pub avg_accuracy: f64,
    pub final_accuracy: f64,
    pub classes_seen: Vec<usize>,
    pub eval_queries: Vec<usize>,
    /// Backbone passes per eval query, counted at the call sites.
    pub forward_passes_per_query: Vec<u64>,
    /// Final-epoch training accuracy of the task adapter (absent when
    /// nothing was trained).
    pub train_accuracy: Vec<Option<f64>>,
    pub merge_count: usize,
    pub snapshot_count: usize,
    /// Training or prototype reads of another task's data. Must be zero.
    pub cross_task_access_count: u64,
    pub timing: PhaseTimes,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RunReport {
    pub(crate) fn new(method: Method, config: &RunConfig) -> Self {
        RunReport {
            method,
            seed: config.train.seed,
            experiment: None,
            config: config.clone(),
            per_task_accuracy: Vec::new(),
            avg_accuracy: 0.0,
            final_accuracy: 0.0,
            classes_seen: Vec::new(),
            eval_queries: Vec::new(),
            forward_passes_per_query: Vec::new(),
            train_accuracy: Vec::new(),
            merge_count: 0,
            snapshot_count: 0,
            cross_task_access_count: 0,
            timing: PhaseTimes::default(),
            notes: Vec::new(),
        }
    }

    pub(crate) fn push_task(&mut self, rec: TaskRecord) {
        self.per_task_accuracy.push(rec.accuracy);
        self.classes_seen.push(rec.classes_seen);
        self.eval_queries.push(rec.queries);
        self.forward_passes_per_query.push(rec.forwards_per_query);
        self.train_accuracy.push(rec.train_accuracy);
        self.timing.train_seconds.push(rec.train_seconds);
        self.timing.prototype_seconds.push(rec.prototype_seconds);
        self.timing.eval_seconds.push(rec.eval_seconds);
        if let Some(p) = rec.probe_seconds_per_query {
            self.timing.probe_seconds_per_query.push(p);
        }
        if let Ok((avg, last)) = compute_metrics(&self.per_task_accuracy) {
            self.avg_accuracy = avg;
            self.final_accuracy = last;
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.per_task_accuracy.len()
    }

    /// Copy with wall-clock fields cleared, for determinism comparisons.
    pub fn without_timing(&self) -> RunReport {
        RunReport {
            timing: PhaseTimes::default(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            offset: 0,
            message: format!("report JSON: {e}"),
        })
    }

    /// `task,accuracy`, one row per task.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,accuracy\n");
        for (t, a) in self.per_task_accuracy.iter().enumerate() {
            out.push_str(&format!("{},{}\n", t + 1, fmt_f64(*a)));
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Per-task figures collected by a method.
#[derive(Clone, Debug, Default)]
pub(crate) struct TaskRecord {
    pub accuracy: f64,
    pub classes_seen: usize,
    pub queries: usize,
    pub forwards_per_query: u64,
    pub train_accuracy: Option<f64>,
    pub train_seconds: f64,
    pub prototype_seconds: f64,
    pub eval_seconds: f64,
    pub probe_seconds_per_query: Option<f64>,
}

/// `(Ā, A_T)`: mean of the per-task accuracies and the last one.
pub fn compute_metrics(per_task_accuracy: &[f64]) -> Result<(f64, f64)> {
    let last = *per_task_accuracy
        .last()
        .ok_or_else(|| Error::Data("no per-task accuracies".into()))?;
    let mut sum = CompensatedSum::default();
    for &a in per_task_accuracy {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Data(format!("accuracy {a} outside [0, 1]")));
        }
        sum.add(a);
    }
    Ok((sum.value() / per_task_accuracy.len() as f64, last))
}

/// Mean and sample standard deviation across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let mut s = CompensatedSum::default();
        values.iter().for_each(|&v| s.add(v));
        let mean = s.value() / n as f64;
        let std = if n > 1 {
            let mut q = CompensatedSum::default();
            values.iter().for_each(|&v| q.add((v - mean) * (v - mean)));
            (q.value() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

/// Cross-seed summary written next to the per-seed reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub avg_accuracy: MeanStd,
    pub final_accuracy: MeanStd,
    pub per_task_accuracy: Vec<MeanStd>,
    pub reports: Vec<String>,
}

impl RunSummary {
    pub fn from_reports(reports: &[RunReport], files: Vec<String>) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Data("no reports to summarize".into()))?;
        let n_tasks = first.n_tasks();
        let per_task = (0..n_tasks)
            .map(|t| {
                let v: Vec<f64> = reports
                    .iter()
                    .filter_map(|r| r.per_task_accuracy.get(t).copied())
                    .collect();
                MeanStd::of(&v)
            })
            .collect();
        Ok(RunSummary {
            method: first.method,
            seeds: reports.iter().map(|r| r.seed).collect(),
            avg_accuracy: MeanStd::of(&reports.iter().map(|r| r.avg_accuracy).collect::<Vec<_>>()),
            final_accuracy: MeanStd::of(&reports.iter().map(|r| r.final_accuracy).collect::<Vec<_>>()),
            per_task_accuracy: per_task,
            reports: files,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn metrics_simple_cases() {
        assert_eq!(compute_metrics(&[0.8, 0.6]).unwrap(), (0.7, 0.6));
        assert_eq!(compute_metrics(&[1.0]).unwrap(), (1.0, 1.0));
        assert!(matches!(compute_metrics(&[]), Err(Error::Data(_))));
        assert!(compute_metrics(&[1.5]).is_err());
    }

    #[test]
    fn metrics_mean_matches_exact_fixed_point_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let v: Vec<f64> = (0..20).map(|_| rng.gen::<f64>()).collect();
            // rand's f64 samples are multiples of 2^-53, so this sum is exact.
            let exact: u128 = v.iter().map(|x| (x * 2f64.powi(53)) as u128).sum();
            let oracle = exact as f64 / 2f64.powi(53) / 20.0;
            let (avg, last) = compute_metrics(&v).unwrap();
            assert!((avg - oracle).abs() <= 1e-15);
            assert_eq!(last, v[19]);
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("ease".parse::<Method>().is_err());
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 1.0).abs() < 1e-15);
    }
}
