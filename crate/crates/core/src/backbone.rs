//! Frozen seeded feature extractor.
//!
//! An input projection followed by residual MLP blocks. Adapters attach in
//! parallel to each block's MLP:
//!
//! ```text
//! h <- h + MLP_b(h) + scale * ReLU(h W_down_b) W_up_b
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterWeights;
use crate::error::{Error, Result};
use crate::numerics::{vecmat_into, Fnv, Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    Gelu,
}

impl Nonlinearity {
    #[inline]
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Relu => relu(x),
            Nonlinearity::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
        }
    }

    #[inline]
    pub(crate) fn derivative(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Relu => relu_grad(x),
            Nonlinearity::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
        }
    }
}

impl std::str::FromStr for Nonlinearity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Nonlinearity::Relu),
            "gelu" => Ok(Nonlinearity::Gelu),
            other => Err(Error::Config(format!("unknown nonlinearity `{other}`"))),
        }
    }
}

// sqrt(2 / pi), tanh approximation of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;

#[inline]
pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Subgradient at 0 is 0.
#[inline]
pub(crate) fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `h + mlp + scale * delta`, skipping an exactly-zero adapter term so that a
/// zero up-projection reproduces the adapter-free bits (including `-0.0`).
#[inline]
fn residual_update(h: f64, mlp: f64, scale: f64, delta: f64) -> f64 {
    let out = h + mlp;
    if delta == 0.0 {
        out
    } else {
        out + scale * delta
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub hidden_dim: usize,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("n_blocks", self.n_blocks),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("backbone {name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Residual MLP block `d -> hidden -> d` with biases.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBlock {
    pub(crate) w1: Matrix,
    pub(crate) b1: Vec<f64>,
    pub(crate) w2: Matrix,
    pub(crate) b2: Vec<f64>,
}

impl FrozenBlock {
    pub fn new(w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64>) -> Result<Self> {
        let (d, hidden) = w1.shape();
        w2.ensure_shape(hidden, d, "block w2")?;
        if b1.len() != hidden || b2.len() != d {
            return Err(Error::shape("block bias length"));
        }
        Ok(FrozenBlock { w1, b1, w2, b2 })
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }
    pub fn b1(&self) -> &[f64] {
        &self.b1
    }
    pub fn w2(&self) -> &Matrix {
        &self.w2
    }
    pub fn b2(&self) -> &[f64] {
        &self.b2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    input_proj: Matrix,
    blocks: Vec<FrozenBlock>,
}

/// Per-block intermediate values kept for backpropagation.
#[derive(Clone, Debug)]
pub(crate) struct BlockTrace {
    pub h_in: Vec<f64>,
    pub z1: Vec<f64>,
    /// Adapter pre-activation `h_in · W_down`.
    pub u: Vec<f64>,
    /// Bottleneck activation after ReLU and dropout.
    pub q: Vec<f64>,
    /// Inverted-dropout multipliers, when dropout is active.
    pub mask: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub(crate) struct ForwardTrace {
    pub blocks: Vec<BlockTrace>,
    pub features: Vec<f64>,
}

pub fn build_backbone(config: &BackboneConfig) -> Result<Backbone> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (dim_in, d, hidden) = (config.input_dim, config.embed_dim, config.hidden_dim);
    let input_proj = Matrix::gaussian(dim_in, d, 1.0 / (dim_in as f64).sqrt(), &mut rng);
    let blocks = (0..config.n_blocks)
        .map(|_| {
            let w1 = Matrix::gaussian(d, hidden, 1.0 / (d as f64).sqrt(), &mut rng);
            let w2 = Matrix::gaussian(hidden, d, 1.0 / (hidden as f64).sqrt(), &mut rng);
            FrozenBlock {
                w1,
                b1: vec![0.0; hidden],
                w2,
                b2: vec![0.0; d],
            }
        })
        .collect();
    Ok(Backbone {
        config: config.clone(),
        input_proj,
        blocks,
    })
}

impl Backbone {
    /// Assemble a backbone from explicit weights.
    pub fn from_parts(
        config: BackboneConfig,
        input_proj: Matrix,
        blocks: Vec<FrozenBlock>,
    ) -> Result<Self> {
        config.validate()?;
        input_proj.ensure_shape(config.input_dim, config.embed_dim, "input projection")?;
        if blocks.len() != config.n_blocks {
            return Err(Error::shape(format!(
                "expected {} blocks, got {}",
                config.n_blocks,
                blocks.len()
            )));
        }
        for b in &blocks {
            b.w1.ensure_shape(config.embed_dim, config.hidden_dim, "block w1")?;
            b.w2.ensure_shape(config.hidden_dim, config.embed_dim, "block w2")?;
        }
        Ok(Backbone {
            config,
            input_proj,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn n_blocks(&self) -> usize {
        self.config.n_blocks
    }

    pub fn input_proj(&self) -> &Matrix {
        &self.input_proj
    }

    pub fn blocks(&self) -> &[FrozenBlock] {
        &self.blocks
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.input_proj.checksum());
        for b in &self.blocks {
            h.write_u64(b.w1.checksum());
            h.write_u64(b.w2.checksum());
            for v in b.b1.iter().chain(&b.b2) {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    pub(crate) fn check_adapter(&self, adapter: &AdapterWeights) -> Result<()> {
        if adapter.n_blocks() != self.n_blocks() || adapter.embed_dim() != self.embed_dim() {
            return Err(Error::shape(format!(
                "adapter has {} blocks of dim {}, backbone has {} blocks of dim {}",
                adapter.n_blocks(),
                adapter.embed_dim(),
                self.n_blocks(),
                self.embed_dim()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has dim {}, backbone expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Feature embedding of `x`, with an optional adapter attached.
    pub fn forward_features(&self, adapter: Option<&AdapterWeights>, x: &[f64]) -> Result<Vector> {
        self.check_input(x)?;
        if let Some(a) = adapter {
            self.check_adapter(a)?;
        }
        Ok(Vector(self.forward_unchecked(adapter, x)))
    }

    pub(crate) fn forward_unchecked(&self, adapter: Option<&AdapterWeights>, x: &[f64]) -> Vec<f64> {
        let d = self.embed_dim();
        let mut h = vec![0.0; d];
        vecmat_into(x, &self.input_proj, &mut h);
        let mut z1 = vec![0.0; self.config.hidden_dim];
        let mut m = vec![0.0; d];
        let mut u = Vec::new();
        let mut delta = vec![0.0; d];
        let act = self.config.nonlinearity;
        for (b, block) in self.blocks.iter().enumerate() {
            vecmat_into(&h, &block.w1, &mut z1);
            for (z, bias) in z1.iter_mut().zip(&block.b1) {
                *z = act.apply(*z + bias);
            }
            vecmat_into(&z1, &block.w2, &mut m);
            let scale = match adapter {
                Some(a) => {
                    let ab = &a.blocks()[b];
                    u.resize(ab.down.cols(), 0.0);
                    vecmat_into(&h, &ab.down, &mut u);
                    u.iter_mut().for_each(|v| *v = relu(*v));
                    vecmat_into(&u, &ab.up, &mut delta);
                    a.scale()
                }
                None => 0.0,
            };
            for i in 0..d {
                h[i] = residual_update(h[i], m[i] + block.b2[i], scale, delta[i]);
            }
        }
        h
    }

    /// Forward pass keeping every intermediate needed by backprop.
    /// `dropout` carries `(rate, rng)` in training mode.
    pub(crate) fn forward_trace<R: rand::Rng>(
        &self,
        adapter: &AdapterWeights,
        x: &[f64],
        mut dropout: Option<(f64, &mut R)>,
    ) -> ForwardTrace {
        let d = self.embed_dim();
        let r = adapter.bottleneck();
        let act = self.config.nonlinearity;
        let mut h = vec![0.0; d];
        vecmat_into(x, &self.input_proj, &mut h);
        let mut traces = Vec::with_capacity(self.blocks.len());
        let mut a1 = vec![0.0; self.config.hidden_dim];
        let mut m = vec![0.0; d];
        let mut delta = vec![0.0; d];
        for (block, ab) in self.blocks.iter().zip(adapter.blocks()) {
            let mut z1 = vec![0.0; self.config.hidden_dim];
            vecmat_into(&h, &block.w1, &mut z1);
            for ((z, bias), a) in z1.iter_mut().zip(&block.b1).zip(a1.iter_mut()) {
                *z += bias;
                *a = act.apply(*z);
            }
            vecmat_into(&a1, &block.w2, &mut m);
            let mut u = vec![0.0; r];
            vecmat_into(&h, &ab.down, &mut u);
            let mut q: Vec<f64> = u.iter().map(|&v| relu(v)).collect();
            let mask = match dropout.as_mut() {
                Some((rate, rng)) if *rate > 0.0 => {
                    let keep = 1.0 - *rate;
                    let mask: Vec<f64> = (0..r)
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    q.iter_mut().zip(&mask).for_each(|(v, k)| *v *= k);
                    Some(mask)
                }
                _ => None,
            };
            vecmat_into(&q, &ab.up, &mut delta);
            let h_in = h.clone();
            for i in 0..d {
                h[i] = residual_update(h[i], m[i] + block.b2[i], adapter.scale(), delta[i]);
            }
            traces.push(BlockTrace {
                h_in,
                z1,
                u,
                q,
                mask,
            });
        }
        ForwardTrace {
            blocks: traces,
            features: h,
        }
    }
}
