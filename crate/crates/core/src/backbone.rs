//! Feed-forward feature map with frozen base weights and trainable low-rank adapters.
//!
//! Each layer computes `z = W h + bias` with effective weight
//! `W = W0 + (alpha / r) * Aᵀ B`, where `W0` (m×n) and `bias` are frozen and
//! only `A` (r×m) and `B` (r×n) are trained. The adapter product is never
//! materialized: `z = W0 h + (alpha / r) * Aᵀ (B h) + bias`, which is also where
//! training-time dropout is applied. The activation is applied between layers,
//! not after the last one.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamW;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Tanh,
    Identity,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.01 }
    }
}

impl Activation {
    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        match *self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    w0: DMatrix<f64>,
    bias: DVector<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    lora_alpha: f64,
}

impl AdapterLayer {
    pub fn from_parts(
        w0: DMatrix<f64>,
        bias: DVector<f64>,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        lora_alpha: f64,
    ) -> Result<Self> {
        let (m, n) = w0.shape();
        let r = a.nrows();
        if r == 0 || r > m.min(n) {
            return Err(Error::InvalidShape(format!(
                "rank {r} must be in 1..={} for a {m}x{n} layer",
                m.min(n)
            )));
        }
        if a.ncols() != m || b.shape() != (r, n) || bias.len() != m {
            return Err(Error::InvalidShape(format!(
                "adapter shapes A {:?}, B {:?}, bias {} do not fit W0 {m}x{n}",
                a.shape(),
                b.shape(),
                bias.len()
            )));
        }
        if !(lora_alpha.is_finite() && lora_alpha > 0.0) {
            return Err(Error::InvalidShape(format!("lora_alpha {lora_alpha} must be > 0")));
        }
        Ok(Self {
            w0,
            bias,
            a,
            b,
            lora_alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w0.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w0.nrows()
    }

    pub fn scale(&self) -> f64 {
        self.lora_alpha / self.rank() as f64
    }

    pub fn lora_alpha(&self) -> f64 {
        self.lora_alpha
    }

    pub fn w0(&self) -> &DMatrix<f64> {
        &self.w0
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.b
    }

    /// `W0 + (alpha / r) Aᵀ B`.
    pub fn effective_weight(&self) -> DMatrix<f64> {
        &self.w0 + self.a.transpose() * &self.b * self.scale()
    }
}

/// Shape and initialization settings for [`Backbone::init`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub rank: usize,
    pub lora_alpha: f64,
    pub activation: Activation,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_dim: 0,
            hidden: vec![64, 64],
            output_dim: 32,
            rank: 8,
            lora_alpha: 32.0,
            activation: Activation::default(),
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    input_dim: usize,
    layers: Vec<AdapterLayer>,
    activation: Activation,
    dropout: f64,
}

/// Per-layer adapter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub da: DMatrix<f64>,
    pub db: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGradients {
    pub layers: Vec<LayerGradients>,
}

impl BackboneGradients {
    pub fn zeros_like(bb: &Backbone) -> Self {
        Self {
            layers: bb
                .layers
                .iter()
                .map(|l| LayerGradients {
                    da: DMatrix::zeros(l.a.nrows(), l.a.ncols()),
                    db: DMatrix::zeros(l.b.nrows(), l.b.ncols()),
                })
                .collect(),
        }
    }

    pub fn scale_mut(&mut self, k: f64) {
        for g in &mut self.layers {
            g.da *= k;
            g.db *= k;
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.da.iter().chain(g.db.iter()).all(|&x| x == 0.0))
    }
}

#[derive(Debug, Clone)]
struct LayerTape {
    input: DMatrix<f64>,
    adapter_in: DMatrix<f64>,
    pre: DMatrix<f64>,
    mask: Option<DMatrix<f64>>,
}

/// Activations recorded by [`Backbone::forward_tape`] for one batch.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    layers: Vec<LayerTape>,
    output: DMatrix<f64>,
}

impl ForwardTape {
    /// Features, one row per input.
    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    // Row-major fill so the draw order matches the checkpoint layout.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = rng.sample(StandardNormal);
            m[(i, j)] = z * std;
        }
    }
    m
}

impl Backbone {
    /// Random frozen base weights (std `1/sqrt(fan_in)`), Gaussian `A` with std
    /// `1/sqrt(r)` and `B = 0`, so the initial map equals the frozen base.
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.output_dim == 0 || cfg.hidden.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "zero-width layer in {} -> {:?} -> {}",
                cfg.input_dim, cfg.hidden, cfg.output_dim
            )));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::InvalidShape(format!("dropout {} not in [0, 1)", cfg.dropout)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![cfg.input_dim];
        dims.extend(&cfg.hidden);
        dims.push(cfg.output_dim);

        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (n, m) = (w[0], w[1]);
            let r = cfg.rank;
            if r == 0 || r > m.min(n) {
                return Err(Error::InvalidShape(format!(
                    "rank {r} exceeds min({m}, {n}) for a {n} -> {m} layer"
                )));
            }
            let w0 = gaussian_matrix(&mut rng, m, n, 1.0 / (n as f64).sqrt());
            let a = gaussian_matrix(&mut rng, r, m, 1.0 / (r as f64).sqrt());
            let b = DMatrix::zeros(r, n);
            layers.push(AdapterLayer::from_parts(w0, DVector::zeros(m), a, b, cfg.lora_alpha)?);
        }
        Ok(Self {
            input_dim: cfg.input_dim,
            layers,
            activation: cfg.activation,
            dropout: cfg.dropout,
        })
    }

    /// A map with no layers: features are the inputs themselves.
    pub fn identity(dim: usize) -> Self {
        Self {
            input_dim: dim,
            layers: Vec::new(),
            activation: Activation::Identity,
            dropout: 0.0,
        }
    }

    pub fn from_layers(layers: Vec<AdapterLayer>, activation: Activation, dropout: f64) -> Result<Self> {
        let input_dim = layers
            .first()
            .map(AdapterLayer::in_dim)
            .ok_or_else(|| Error::InvalidShape("backbone needs at least one layer".into()))?;
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::InvalidShape(format!(
                    "layer output {} does not feed input {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        Ok(Self {
            input_dim,
            layers,
            activation,
            dropout,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, AdapterLayer::out_dim)
    }

    pub fn layers(&self) -> &[AdapterLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AdapterLayer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn has_adapters(&self) -> bool {
        !self.layers.is_empty()
    }

    /// Copy with every `B` zeroed, i.e. the frozen base network.
    pub fn without_adapters(&self) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.b.fill(0.0);
        }
        out
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: cols,
            });
        }
        Ok(())
    }

    /// Deterministic features of one encoded input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let row = DMatrix::from_row_slice(1, x.len(), x);
        Ok(self.forward_batch(&row)?.row(0).iter().copied().collect())
    }

    /// Deterministic features, one row per input row.
    pub fn forward_batch(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.run(xs, None::<&mut ChaCha8Rng>, false)?.output)
    }

    /// Forward pass that records what [`Backbone::backward`] needs. With an
    /// rng, adapter outputs are dropped at the configured rate.
    pub fn forward_tape<R: Rng>(&self, xs: &DMatrix<f64>, dropout_rng: Option<&mut R>) -> Result<ForwardTape> {
        self.run(xs, dropout_rng, true)
    }

    fn run<R: Rng>(&self, xs: &DMatrix<f64>, mut rng: Option<&mut R>, record: bool) -> Result<ForwardTape> {
        self.check_input(xs.ncols())?;
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backbone input"));
        }
        let keep = 1.0 - self.dropout;
        let last = self.layers.len().saturating_sub(1);
        let mut h = xs.clone();
        let mut tape = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        for (li, layer) in self.layers.iter().enumerate() {
            let adapter_in = &h * layer.b.transpose();
            let mut adapter_out = &adapter_in * &layer.a;
            let mask = match rng.as_deref_mut() {
                Some(r) if self.dropout > 0.0 => {
                    let m = DMatrix::from_fn(adapter_out.nrows(), adapter_out.ncols(), |_, _| {
                        if r.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    adapter_out.component_mul_assign(&m);
                    Some(m)
                }
                _ => None,
            };
            let mut pre = &h * layer.w0.transpose();
            pre += adapter_out * layer.scale();
            for mut row in pre.row_iter_mut() {
                row += layer.bias.transpose();
            }
            let next = if li < last {
                pre.map(|z| self.activation.apply(z))
            } else {
                pre.clone()
            };
            if record {
                tape.push(LayerTape {
                    input: h,
                    adapter_in,
                    pre,
                    mask,
                });
            }
            h = next;
        }
        Ok(ForwardTape {
            layers: tape,
            output: h,
        })
    }

    /// Gradients of `sum_rows <cotangent_row, output_row>` with respect to every `A` and `B`.
    pub fn backward(&self, tape: &ForwardTape, cotangent: &DMatrix<f64>) -> Result<BackboneGradients> {
        if tape.layers.len() != self.layers.len() {
            return Err(Error::MissingForwardCache);
        }
        if cotangent.shape() != tape.output.shape() {
            return Err(Error::DimensionMismatch {
                expected: tape.output.ncols(),
                got: cotangent.ncols(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d_out = cotangent.clone();
        let last = self.layers.len().saturating_sub(1);
        for (li, (layer, t)) in self.layers.iter().zip(&tape.layers).enumerate().rev() {
            let d_pre = if li < last {
                let mut d = d_out;
                d.zip_apply(&t.pre, |g, z| *g *= self.activation.derivative(z));
                d
            } else {
                d_out
            };
            let mut d_adapter_out = &d_pre * layer.scale();
            if let Some(mask) = &t.mask {
                d_adapter_out.component_mul_assign(mask);
            }
            let da = t.adapter_in.transpose() * &d_adapter_out;
            let d_adapter_in = &d_adapter_out * layer.a.transpose();
            let db = d_adapter_in.transpose() * &t.input;
            d_out = &d_pre * &layer.w0 + &d_adapter_in * &layer.b;
            grads.push(LayerGradients { da, db });
        }
        grads.reverse();
        Ok(BackboneGradients { layers: grads })
    }

    /// One optimizer step on the adapters; `grads` are of a loss to minimize.
    /// Uses optimizer blocks `first_block..first_block + 2 * layers`.
    pub fn apply_gradient_step(
        &mut self,
        grads: &BackboneGradients,
        opt: &mut AdamW,
        first_block: usize,
    ) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::InvalidShape(format!(
                "{} gradient layers for {} backbone layers",
                grads.layers.len(),
                self.layers.len()
            )));
        }
        for (layer, g) in self.layers.iter().zip(&grads.layers) {
            if g.da.shape() != layer.a.shape() || g.db.shape() != layer.b.shape() {
                return Err(Error::InvalidShape("gradient shape does not match adapter".into()));
            }
        }
        for (li, (layer, g)) in self.layers.iter_mut().zip(&grads.layers).enumerate() {
            opt.update(first_block + 2 * li, layer.a.as_mut_slice(), g.da.as_slice());
            opt.update(first_block + 2 * li + 1, layer.b.as_mut_slice(), g.db.as_slice());
        }
        Ok(())
    }
}
