//! Bottleneck adapter: parameters, task training with hand-written
//! backpropagation, gradient checking, and the `ACMADPT1` snapshot format.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{relu_grad, Backbone, ForwardTrace};
use crate::error::{Error, Result};
use crate::numerics::{add_outer, matvec_into, vecmat_into, Fnv, Matrix};

/// One block's down/up projection pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterBlock {
    /// `d x r`
    pub down: Matrix,
    /// `r x d`
    pub up: Matrix,
}

/// The trainable adapter bundle: one [`AdapterBlock`] per backbone block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterWeights {
    blocks: Vec<AdapterBlock>,
    scale: f64,
}

impl AdapterWeights {
    pub fn new(blocks: Vec<AdapterBlock>, scale: f64) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::Config("adapter needs at least one block".into()))?;
        let (d, r) = first.down.shape();
        if r == 0 || r >= d {
            return Err(Error::Config(format!(
                "bottleneck must satisfy 1 <= r < d, got r={r}, d={d}"
            )));
        }
        for (i, b) in blocks.iter().enumerate() {
            b.down.ensure_shape(d, r, &format!("block {i} down-projection"))?;
            b.up.ensure_shape(r, d, &format!("block {i} up-projection"))?;
            if !b.down.is_finite() || !b.up.is_finite() {
                return Err(Error::Numeric(format!("block {i} has non-finite weights")));
            }
        }
        if !scale.is_finite() {
            return Err(Error::Config("adapter scale must be finite".into()));
        }
        Ok(AdapterWeights { blocks, scale })
    }

    pub fn blocks(&self) -> &[AdapterBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [AdapterBlock] {
        &mut self.blocks
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.blocks[0].down.rows()
    }

    pub fn bottleneck(&self) -> usize {
        self.blocks[0].down.cols()
    }

    pub fn same_shape(&self, other: &AdapterWeights) -> bool {
        self.n_blocks() == other.n_blocks()
            && self.embed_dim() == other.embed_dim()
            && self.bottleneck() == other.bottleneck()
    }

    pub fn ensure_same_shape(&self, other: &AdapterWeights) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(format!(
                "adapter shapes differ: ({}, {}, {}) vs ({}, {}, {})",
                self.n_blocks(),
                self.embed_dim(),
                self.bottleneck(),
                other.n_blocks(),
                other.embed_dim(),
                other.bottleneck()
            )));
        }
        Ok(())
    }

    /// All parameters in block order, `down` before `up`.
    pub fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.blocks.iter().flat_map(|b| [&b.down, &b.up])
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.blocks.iter_mut().flat_map(|b| [&mut b.down, &mut b.up])
    }

    pub fn param_count(&self) -> usize {
        self.matrices().map(|m| m.data().len()).sum()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.scale.to_bits());
        for m in self.matrices() {
            h.write_u64(m.checksum());
        }
        h.finish()
    }

    pub fn up_checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for b in &self.blocks {
            h.write_u64(b.up.checksum());
        }
        h.finish()
    }

    pub fn max_abs_diff(&self, other: &AdapterWeights) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let mut worst = 0.0f64;
        for (a, b) in self.matrices().zip(other.matrices()) {
            worst = worst.max(a.max_abs_diff(b)?);
        }
        Ok(worst)
    }

    /// Entrywise combination `f(self, other)` into a new bundle.
    pub fn zip_with(
        &self,
        other: &AdapterWeights,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<AdapterWeights> {
        self.ensure_same_shape(other)?;
        let mut out = self.clone();
        for (m, o) in out.matrices_mut().zip(other.matrices()) {
            for (x, y) in m.data_mut().iter_mut().zip(o.data()) {
                *x = f(*x, *y);
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 12 + 8 + 8 * self.param_count());
        out.extend_from_slice(ADAPTER_MAGIC);
        out.extend_from_slice(&(self.n_blocks() as u32).to_le_bytes());
        out.extend_from_slice(&(self.embed_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.bottleneck() as u32).to_le_bytes());
        out.extend_from_slice(&self.scale.to_le_bytes());
        for m in self.matrices() {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor { bytes, pos: 0 };
        let magic = cur.take(8, "magic")?;
        if magic != ADAPTER_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected ACMADPT1".into(),
            });
        }
        let n_blocks = cur.u32("n_blocks")? as usize;
        let d = cur.u32("d")? as usize;
        let r = cur.u32("r")? as usize;
        let scale = cur.f64("scale")?;
        if n_blocks == 0 || r == 0 || r >= d {
            return Err(Error::Format {
                offset: 8,
                message: format!("invalid header n_blocks={n_blocks}, d={d}, r={r}"),
            });
        }
        let expected = 28 + n_blocks * 2 * d * r * 8;
        if bytes.len() != expected {
            return Err(Error::Format {
                offset: bytes.len().min(expected) as u64,
                message: format!("expected {expected} bytes, found {}", bytes.len()),
            });
        }
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let down = cur.matrix(d, r)?;
            let up = cur.matrix(r, d)?;
            blocks.push(AdapterBlock { down, up });
        }
        AdapterWeights::new(blocks, scale)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        AdapterWeights::from_bytes(&bytes)
    }
}

pub const ADAPTER_MAGIC: &[u8; 8] = b"ACMADPT1";

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let offset = self.pos as u64;
        let raw = self.take(rows * cols * 8, "weights")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format {
            offset,
            message: e.to_string(),
        })
    }
}

/// Fresh adapter (Gaussian `W_down` with std `1/sqrt(d)`, zero `W_up`), or a
/// deep copy of `init_from`.
pub fn init_adapter(
    n_blocks: usize,
    d: usize,
    r: usize,
    scale: f64,
    init_from: Option<&AdapterWeights>,
    seed: u64,
) -> Result<AdapterWeights> {
    if let Some(src) = init_from {
        if src.n_blocks() != n_blocks || src.embed_dim() != d || src.bottleneck() != r {
            return Err(Error::Config(format!(
                "init_from has shape ({}, {}, {}), requested ({n_blocks}, {d}, {r})",
                src.n_blocks(),
                src.embed_dim(),
                src.bottleneck()
            )));
        }
        return Ok(src.clone());
    }
    if n_blocks == 0 || r == 0 || r >= d {
        return Err(Error::Config(format!(
            "invalid adapter shape n_blocks={n_blocks}, d={d}, r={r} (need r < d)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = (0..n_blocks)
        .map(|_| AdapterBlock {
            down: Matrix::gaussian(d, r, 1.0 / (d as f64).sqrt(), &mut rng),
            up: Matrix::zeros(r, d),
        })
        .collect();
    AdapterWeights::new(blocks, scale)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    CosineAnnealing,
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine_annealing" | "cosine" => Ok(Schedule::CosineAnnealing),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub dropout: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted as the frozen limit.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`: `lr0 * (1 + cos(pi * e / E)) / 2`
    /// under cosine annealing, stepped once per epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::CosineAnnealing => {
                let phase = std::f64::consts::PI * epoch as f64 / self.epochs as f64;
                0.5 * self.learning_rate * (1.0 + phase.cos())
            }
        }
    }
}

/// Throwaway per-task linear softmax head, `logits = phi · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl TaskHead {
    pub fn zeros(d: usize, n_classes: usize) -> Self {
        TaskHead {
            weight: Matrix::zeros(d, n_classes),
            bias: vec![0.0; n_classes],
        }
    }

    pub fn gaussian(d: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TaskHead {
            weight: Matrix::gaussian(d, n_classes, 1.0 / (d as f64).sqrt(), &mut rng),
            bias: vec![0.0; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }
}

/// Borrowed training samples with task-local labels `0..n_classes`.
#[derive(Clone, Debug)]
pub struct LabeledBatch<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl<'a> LabeledBatch<'a> {
    /// Builds a batch from global class ids, mapping them onto `0..C` in
    /// ascending class-id order.
    pub fn from_global(inputs: Vec<&'a [f64]>, class_ids: &[usize]) -> Result<Self> {
        if inputs.len() != class_ids.len() {
            return Err(Error::shape("inputs and labels differ in length"));
        }
        let mut classes = class_ids.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let labels = class_ids
            .iter()
            .map(|c| classes.binary_search(c).unwrap())
            .collect();
        Ok(LabeledBatch {
            inputs,
            labels,
            n_classes: classes.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn validate(&self, backbone: &Backbone) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        if self.labels.len() != self.inputs.len() {
            return Err(Error::shape("inputs and labels differ in length"));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.n_classes) {
            return Err(Error::Data(format!(
                "label {y} outside the task's {} classes",
                self.n_classes
            )));
        }
        for x in &self.inputs {
            backbone.check_input(x)?;
        }
        Ok(())
    }
}

/// Gradients with the same layout as the parameters they belong to.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub adapter: Vec<AdapterBlock>,
    pub head: TaskHead,
}

impl Gradients {
    fn zeros_like(adapter: &AdapterWeights, head: &TaskHead) -> Self {
        Gradients {
            adapter: adapter
                .blocks()
                .iter()
                .map(|b| AdapterBlock {
                    down: Matrix::zeros(b.down.rows(), b.down.cols()),
                    up: Matrix::zeros(b.up.rows(), b.up.cols()),
                })
                .collect(),
            head: TaskHead::zeros(head.weight.rows(), head.n_classes()),
        }
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    logits.iter_mut().for_each(|v| *v /= sum);
}

/// Cross-entropy of one traced sample; writes `dL/dlogits` into `probs`.
fn head_loss(head: &TaskHead, features: &[f64], label: usize, probs: &mut [f64]) -> f64 {
    vecmat_into(features, &head.weight, probs);
    for (p, b) in probs.iter_mut().zip(&head.bias) {
        *p += b;
    }
    let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + probs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = lse - probs[label];
    softmax_in_place(probs);
    probs[label] -= 1.0;
    loss
}

/// Accumulates `weight * dL/dθ` for one traced sample given `g = dL/dphi`.
fn backprop_sample(
    backbone: &Backbone,
    adapter: &AdapterWeights,
    trace: &ForwardTrace,
    mut g: Vec<f64>,
    weight: f64,
    grads: &mut [AdapterBlock],
) {
    let act = backbone.config().nonlinearity;
    let scale = adapter.scale();
    let r = adapter.bottleneck();
    let hidden = backbone.config().hidden_dim;
    let mut dq = vec![0.0; r];
    let mut dz = vec![0.0; hidden];
    let mut dh_mlp = vec![0.0; g.len()];
    let mut dh_adapter = vec![0.0; g.len()];
    let mut q_scaled = vec![0.0; r];
    for b in (0..backbone.n_blocks()).rev() {
        let block = &backbone.blocks()[b];
        let ab = &adapter.blocks()[b];
        let bt = &trace.blocks[b];
        let gb = &mut grads[b];

        // Up-projection: delta = q · W_up, contributes scale * delta.
        q_scaled
            .iter_mut()
            .zip(&bt.q)
            .for_each(|(o, q)| *o = scale * q);
        add_outer(&mut gb.up, weight, &q_scaled, &g);

        // dq = scale * W_up · g, then through dropout and ReLU.
        matvec_into(&ab.up, &g, &mut dq);
        for j in 0..r {
            let mut v = scale * dq[j];
            if let Some(mask) = &bt.mask {
                v *= mask[j];
            }
            dq[j] = v * relu_grad(bt.u[j]);
        }
        add_outer(&mut gb.down, weight, &bt.h_in, &dq);

        // Back into the block input through the frozen MLP and the adapter.
        matvec_into(&block.w2, &g, &mut dz);
        for (dzj, &z) in dz.iter_mut().zip(&bt.z1) {
            *dzj *= act.derivative(z);
        }
        matvec_into(&block.w1, &dz, &mut dh_mlp);
        matvec_into(&ab.down, &dq, &mut dh_adapter);
        for i in 0..g.len() {
            g[i] += dh_mlp[i] + dh_adapter[i];
        }
    }
}

/// Mean cross-entropy over `batch` and its gradients with respect to the
/// adapter and head parameters. No dropout, no weight decay.
pub fn loss_and_gradients(
    backbone: &Backbone,
    adapter: &AdapterWeights,
    head: &TaskHead,
    batch: &LabeledBatch<'_>,
) -> Result<(f64, Gradients)> {
    backbone.check_adapter(adapter)?;
    batch.validate(backbone)?;
    check_head(head, adapter.embed_dim(), batch.n_classes)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    Ok(batch_step(
        backbone,
        adapter,
        head,
        batch,
        &idx,
        None::<(f64, &mut ChaCha8Rng)>,
    ))
}

fn check_head(head: &TaskHead, d: usize, n_classes: usize) -> Result<()> {
    head.weight.ensure_shape(d, n_classes, "task head")?;
    if head.bias.len() != n_classes {
        return Err(Error::shape("task head bias length"));
    }
    Ok(())
}

fn batch_step<R: rand::Rng>(
    backbone: &Backbone,
    adapter: &AdapterWeights,
    head: &TaskHead,
    batch: &LabeledBatch<'_>,
    idx: &[usize],
    mut dropout: Option<(f64, &mut R)>,
) -> (f64, Gradients) {
    let mut grads = Gradients::zeros_like(adapter, head);
    let weight = 1.0 / idx.len() as f64;
    let mut probs = vec![0.0; head.n_classes()];
    let mut loss = 0.0;
    let mut g = vec![0.0; adapter.embed_dim()];
    for &i in idx {
        let trace = backbone.forward_trace(
            adapter,
            batch.inputs[i],
            dropout.as_mut().map(|(p, rng)| (*p, &mut **rng)),
        );
        loss += head_loss(head, &trace.features, batch.labels[i], &mut probs);
        add_outer(&mut grads.head.weight, weight, &trace.features, &probs);
        for (gb, p) in grads.head.bias.iter_mut().zip(&probs) {
            *gb += weight * p;
        }
        matvec_into(&head.weight, &probs, &mut g);
        backprop_sample(backbone, adapter, &trace, g.clone(), weight, &mut grads.adapter);
    }
    (loss * weight, grads)
}

/// Result of [`train_task_adapter`].
#[derive(Clone, Debug)]
pub struct TrainedAdapter {
    pub weights: AdapterWeights,
    /// Mean mini-batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Training-set accuracy of the final adapter + head.
    pub train_accuracy: f64,
}

fn sgd_update(w: &mut Matrix, g: &Matrix, lr: f64, wd: f64) {
    for (x, d) in w.data_mut().iter_mut().zip(g.data()) {
        let step = lr * (d + wd * *x);
        *x -= step;
    }
}

/// Trains an adapter on one task by mini-batch SGD on the softmax
/// cross-entropy of a fresh [`TaskHead`]. The backbone is only read.
pub fn train_task_adapter(
    backbone: &Backbone,
    init: &AdapterWeights,
    batch: &LabeledBatch<'_>,
    cfg: &TrainConfig,
) -> Result<TrainedAdapter> {
    cfg.validate()?;
    backbone.check_adapter(init)?;
    batch.validate(backbone)?;
    let d = init.embed_dim();
    let mut adapter = init.clone();
    let mut head = TaskHead::gaussian(d, batch.n_classes, cfg.seed ^ 0x4845_4144);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let dropout = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut dropout_rng));
            let (loss, grads) = batch_step(backbone, &adapter, &head, batch, chunk, dropout);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            epoch_loss += loss;
            n_batches += 1;
            for (w, g) in adapter.blocks.iter_mut().zip(&grads.adapter) {
                sgd_update(&mut w.down, &g.down, lr, cfg.weight_decay);
                sgd_update(&mut w.up, &g.up, lr, cfg.weight_decay);
            }
            sgd_update(&mut head.weight, &grads.head.weight, lr, cfg.weight_decay);
            for (b, g) in head.bias.iter_mut().zip(&grads.head.bias) {
                *b -= lr * g;
            }
            if !adapter.matrices().all(Matrix::is_finite) {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: f64::NAN,
                });
            }
        }
        epoch_losses.push(epoch_loss / n_batches as f64);
    }

    let mut correct = 0usize;
    let mut logits = vec![0.0; batch.n_classes];
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        let f = backbone.forward_unchecked(Some(&adapter), x);
        vecmat_into(&f, &head.weight, &mut logits);
        let mut best = 0;
        for c in 0..logits.len() {
            if logits[c] + head.bias[c] > logits[best] + head.bias[best] {
                best = c;
            }
        }
        correct += usize::from(best == y);
    }
    Ok(TrainedAdapter {
        weights: adapter,
        epoch_losses,
        train_accuracy: correct as f64 / batch.len() as f64,
    })
}

/// Worst-case agreement between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub compared: usize,
    /// Entries whose perturbation flips a ReLU pre-activation sign; the
    /// loss is not differentiable there, so they are skipped.
    pub excluded: usize,
    /// `(parameter name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

const GRAD_CHECK_STEP: f64 = 1e-5;
const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Which ReLU units are active, across the adapter bottlenecks and (for a
/// ReLU backbone) the frozen MLP hidden layers, for every sample.
fn relu_pattern(backbone: &Backbone, adapter: &AdapterWeights, batch: &LabeledBatch<'_>) -> Vec<bool> {
    let relu_backbone = backbone.config().nonlinearity == crate::backbone::Nonlinearity::Relu;
    let mut pat = Vec::new();
    for x in &batch.inputs {
        let t = backbone.forward_trace(adapter, x, None::<(f64, &mut ChaCha8Rng)>);
        for bt in &t.blocks {
            pat.extend(bt.u.iter().map(|&v| v > 0.0));
            if relu_backbone {
                pat.extend(bt.z1.iter().map(|&v| v > 0.0));
            }
        }
    }
    pat
}

fn batch_loss(backbone: &Backbone, adapter: &AdapterWeights, head: &TaskHead, batch: &LabeledBatch<'_>) -> f64 {
    let mut probs = vec![0.0; head.n_classes()];
    let mut loss = 0.0;
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        let f = backbone.forward_unchecked(Some(adapter), x);
        loss += head_loss(head, &f, y, &mut probs);
    }
    loss / batch.len() as f64
}

fn param_entry(p: &mut AdapterWeights, block: usize, which: usize, i: usize) -> &mut f64 {
    let b = &mut p.blocks[block];
    let m = if which == 0 { &mut b.down } else { &mut b.up };
    &mut m.data_mut()[i]
}

/// Compares every analytic adapter and head gradient entry against a
/// central finite difference of the batch loss.
pub fn adapter_grad_check(
    backbone: &Backbone,
    adapter: &AdapterWeights,
    head: &TaskHead,
    batch: &LabeledBatch<'_>,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_gradients(backbone, adapter, head, batch)?;
    let base_pattern = relu_pattern(backbone, adapter, batch);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        compared: 0,
        excluded: 0,
        worst: None,
    };
    let mut record = |name: String, idx: usize, analytic: f64, numeric: Option<f64>| match numeric {
        None => report.excluded += 1,
        Some(n) => {
            report.compared += 1;
            let rel = (analytic - n).abs() / analytic.abs().max(n.abs()).max(GRAD_CHECK_FLOOR);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name, idx, analytic, n));
            }
        }
    };

    let mut probe = adapter.clone();
    for b in 0..adapter.n_blocks() {
        for (which, name) in [(0, "down"), (1, "up")] {
            let grad = if which == 0 { &grads.adapter[b].down } else { &grads.adapter[b].up };
            for (i, &analytic) in grad.data().iter().enumerate() {
                let orig = *param_entry(&mut probe, b, which, i);
                let mut eval = |v: f64| {
                    *param_entry(&mut probe, b, which, i) = v;
                    let same = relu_pattern(backbone, &probe, batch) == base_pattern;
                    (batch_loss(backbone, &probe, head, batch), same)
                };
                let (plus, same_p) = eval(orig + GRAD_CHECK_STEP);
                let (minus, same_m) = eval(orig - GRAD_CHECK_STEP);
                *param_entry(&mut probe, b, which, i) = orig;
                let numeric = (same_p && same_m).then(|| (plus - minus) / (2.0 * GRAD_CHECK_STEP));
                record(format!("block{b}.{name}"), i, analytic, numeric);
            }
        }
    }

    let mut head_probe = head.clone();
    for i in 0..head.weight.data().len() {
        let orig = head_probe.weight.data()[i];
        head_probe.weight.data_mut()[i] = orig + GRAD_CHECK_STEP;
        let plus = batch_loss(backbone, adapter, &head_probe, batch);
        head_probe.weight.data_mut()[i] = orig - GRAD_CHECK_STEP;
        let minus = batch_loss(backbone, adapter, &head_probe, batch);
        head_probe.weight.data_mut()[i] = orig;
        let n = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        record("head.weight".into(), i, grads.head.weight.data()[i], Some(n));
    }
    for i in 0..head.bias.len() {
        let orig = head_probe.bias[i];
        head_probe.bias[i] = orig + GRAD_CHECK_STEP;
        let plus = batch_loss(backbone, adapter, &head_probe, batch);
        head_probe.bias[i] = orig - GRAD_CHECK_STEP;
        let minus = batch_loss(backbone, adapter, &head_probe, batch);
        head_probe.bias[i] = orig;
        let n = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        record("head.bias".into(), i, grads.head.bias[i], Some(n));
    }
    Ok(report)
}
