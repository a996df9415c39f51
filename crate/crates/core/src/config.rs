//! Flat `key = value` run configuration and its defaults table.
//!
//! The defaults describe the desk-scale reference regime: a synthetic
//! drifting stream under a small random residual-MLP backbone. They are
//! deliberately distinct from the ViT-B/16 training values used with
//! pretrained image models (lr 0.01 to 0.05, 20 epochs, batch 48, r = 16).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::adapter::{Schedule, TrainConfig};
use crate::backbone::{BackboneConfig, Nonlinearity};
use crate::error::{Error, Result};
use crate::harness::{
    read_embedding_file, AdapterConfig, DriftModel, Method, PrototypeSource, RunConfig, SplitSpec, StreamSource,
    StreamSpec,
};
use crate::merging::MergeLimit;

/// One row of the defaults table.
#[derive(Clone, Copy, Debug)]
pub struct Setting {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn s(key: &'static str, default: &'static str, help: &'static str) -> Setting {
    Setting { key, default, help }
}

/// Every recognised key with its default.
pub const DEFAULTS: &[Setting] = &[
    s("method", "acmap", "comma-separated: acmap, acmap_no_ir, acmap_no_cm, simplecil, ensemble"),
    s("seeds", "1993,1994,1995,1996,1997", "run seeds; each seeds the stream, the split and training"),
    s("embeddings", "", "ACMEMB1 or CSV embedding file; empty selects the synthetic stream"),
    s("eval_fraction", "0.3", "embedding files: per-class eval hold-out"),
    s("val_fraction", "0", "embedding files: per-class validation hold-out"),
    s("n_tasks", "10", "synthetic: number of tasks"),
    s("base_classes", "0", "classes in task 1 (0 means inc_classes)"),
    s("inc_classes", "5", "classes per later task"),
    s("train_per_class", "100", "synthetic: training samples per class"),
    s("val_per_class", "0", "synthetic: validation samples per class"),
    s("eval_per_class", "50", "synthetic: eval samples per class"),
    s("input_dim", "32", "synthetic: input dimension"),
    s("cluster_separation", "4", "synthetic: norm scale of class means"),
    s("noise_sigma", "0.3", "synthetic: isotropic within-class noise"),
    s("signal_dim", "8", "synthetic: dimension of the class-mean subspace (0 = full)"),
    s("nuisance_sigma", "0.8", "synthetic: noise in the complement of the signal subspace"),
    s("center_offset", "15", "synthetic: norm of the mean shared by all samples"),
    s("drift", "rotation:0.5", "synthetic: none, rotation:<rad/task>, offset:<norm/task>, random_rotation:<rad/task>"),
    s("embed_dim", "32", "backbone feature dimension d"),
    s("n_blocks", "2", "residual blocks"),
    s("hidden_dim", "64", "block MLP hidden width"),
    s("nonlinearity", "relu", "relu or gelu"),
    s("backbone_seed", "7", "seed of the frozen backbone (fixed across run seeds)"),
    s("bottleneck", "8", "adapter bottleneck r"),
    s("adapter_scale", "1", "adapter output scale"),
    s("learning_rate", "0.03", "SGD learning rate"),
    s("weight_decay", "0.0005", "SGD weight decay"),
    s("epochs", "20", "epochs per task"),
    s("batch_size", "32", "minibatch size"),
    s("schedule", "cosine_annealing", "cosine_annealing or constant"),
    s("dropout", "0", "dropout on the bottleneck activation"),
    s("early_stop", "inf", "merge threshold L (integer >= 1 or inf)"),
    s("prototype_source", "train", "train or validation"),
    s("probe_queries", "0", "fixed query count timed after each task (0 disables)"),
    s("probe_repeats", "3", "timing repeats, minimum reported"),
    s("grid_size", "11", "landscape lattice size G"),
    s("landscape_ir", "true", "landscape adapters trained with initial-weight replacement"),
];

/// Resolved values of a settings map.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub source: StreamSource,
    pub run: RunConfig,
    pub grid_size: usize,
    pub landscape_ir: bool,
}

/// Key/value settings layered over [`DEFAULTS`].
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<&'static str, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            values: DEFAULTS.iter().map(|s| (s.key, s.default.to_string())).collect(),
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for {key}")))
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let setting = DEFAULTS
            .iter()
            .find(|s| s.key == key)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        self.values.insert(setting.key, value.trim().to_string());
        Ok(())
    }

    /// Applies `key=value` pairs in order.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        pairs.into_iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_config_text(&text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        parse(key, self.get(key))
    }

    /// Rendered as a config file that reproduces these settings.
    pub fn to_config_text(&self) -> String {
        DEFAULTS
            .iter()
            .map(|s| format!("{} = {}\n", s.key, self.get(s.key)))
            .collect()
    }

    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let methods = self
            .get("method")
            .split(',')
            .map(|m| m.trim().parse::<Method>())
            .collect::<Result<Vec<_>>>()?;
        let seeds = self
            .get("seeds")
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| parse::<u64>("seeds", s.trim()))
            .collect::<Result<Vec<_>>>()?;
        if seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let base_classes = self.num("base_classes")?;
        let inc_classes = self.num("inc_classes")?;
        let embeddings = self.get("embeddings");
        let (source, input_dim) = if embeddings.is_empty() {
            let spec = StreamSpec {
                n_tasks: self.num("n_tasks")?,
                base_classes,
                inc_classes,
                train_per_class: self.num("train_per_class")?,
                val_per_class: self.num("val_per_class")?,
                eval_per_class: self.num("eval_per_class")?,
                input_dim: self.num("input_dim")?,
                cluster_separation: self.num("cluster_separation")?,
                noise_sigma: self.num("noise_sigma")?,
                signal_dim: self.num("signal_dim")?,
                nuisance_sigma: self.num("nuisance_sigma")?,
                center_offset: self.num("center_offset")?,
                drift: self.get("drift").parse::<DriftModel>()?,
                seed: seeds[0],
            };
            spec.validate()?;
            let dim = spec.input_dim;
            (StreamSource::Synthetic(spec), dim)
        } else {
            let path = PathBuf::from(embeddings);
            let dim = read_embedding_file(&path)?.dim;
            let split = SplitSpec {
                base_classes,
                inc_classes,
                eval_fraction: self.num("eval_fraction")?,
                val_fraction: self.num("val_fraction")?,
                seed: seeds[0],
            };
            split.validate()?;
            (StreamSource::Embedding { path, split }, dim)
        };
        let run = RunConfig {
            backbone: BackboneConfig {
                input_dim,
                embed_dim: self.num("embed_dim")?,
                n_blocks: self.num("n_blocks")?,
                hidden_dim: self.num("hidden_dim")?,
                nonlinearity: self.get("nonlinearity").parse::<Nonlinearity>()?,
                seed: self.num("backbone_seed")?,
            },
            adapter: AdapterConfig {
                bottleneck: self.num("bottleneck")?,
                scale: self.num("adapter_scale")?,
            },
            train: TrainConfig {
                learning_rate: self.num("learning_rate")?,
                weight_decay: self.num("weight_decay")?,
                epochs: self.num("epochs")?,
                batch_size: self.num("batch_size")?,
                schedule: self.get("schedule").parse::<Schedule>()?,
                dropout: self.num("dropout")?,
                seed: seeds[0],
            },
            early_stop: self.get("early_stop").parse::<MergeLimit>()?,
            prototype_source: self.get("prototype_source").parse::<PrototypeSource>()?,
            probe_queries: self.num("probe_queries")?,
            probe_repeats: self.num("probe_repeats")?,
            diagnostics: false,
        };
        run.backbone.validate()?;
        run.train.validate()?;
        if run.probe_repeats == 0 {
            return Err(Error::Config("probe_repeats must be >= 1".into()));
        }
        let grid_size: usize = self.num("grid_size")?;
        if grid_size < 2 {
            return Err(Error::Config("grid_size must be >= 2".into()));
        }
        Ok(ResolvedConfig {
            methods,
            seeds,
            source,
            run,
            grid_size,
            landscape_ir: self.num("landscape_ir")?,
        })
    }
}

/// The reference drifting stream and run configuration (defaults table).
pub fn reference_config() -> ResolvedConfig {
    Settings::default().resolve().expect("defaults resolve")
}
