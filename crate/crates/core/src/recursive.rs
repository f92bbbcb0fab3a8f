//! Closed-form posterior propagation between fine-tunes, the event trigger,
//! and the per-member feature cache.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::head::VbllHead;
use crate::linalg::{cholesky_downdate, cholesky_lower, normal_logpdf};

fn check_dim(head: &VbllHead, phi: &[f64]) -> Result<()> {
    if phi.len() != head.dim() {
        return Err(Error::DimensionMismatch {
            expected: head.dim(),
            got: phi.len(),
        });
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features"));
    }
    Ok(())
}

/// `log N(y; φᵀμ, φᵀΣφ + σ_ε²)` in standardized units.
pub fn predictive_log_likelihood(head: &VbllHead, phi: &[f64], y_std: f64) -> Result<f64> {
    check_dim(head, phi)?;
    let phi = DVector::from_column_slice(phi);
    let mean = phi.dot(head.mu());
    let var = head.chol().tr_mul(&phi).norm_squared() + head.noise_var();
    Ok(normal_logpdf(y_std, mean, var))
}

/// Conditions the head on one observation `(φ, y)`.
///
/// The covariance shrinks through a rank-1 Cholesky downdate; if that would
/// lose positive definiteness the covariance is rebuilt in Joseph form and
/// refactorized.
pub fn recursive_update(head: &VbllHead, phi: &[f64], y_std: f64) -> Result<VbllHead> {
    check_dim(head, phi)?;
    if !y_std.is_finite() {
        return Err(Error::NonFinite("target"));
    }
    let phi = DVector::from_column_slice(phi);
    let l = head.chol();
    let lt_phi = l.tr_mul(&phi);
    let v = l * &lt_phi;
    let noise = head.noise_var();
    let pred_var = lt_phi.norm_squared() + noise;
    let resid = y_std - phi.dot(head.mu());
    let mu = head.mu() + &v * (resid / pred_var);

    let mut chol = l.clone();
    if !cholesky_downdate(&mut chol, &(&v / pred_var.sqrt())) {
        let k = &v / pred_var;
        let d = head.dim();
        let a = DMatrix::identity(d, d) - &k * phi.transpose();
        let joseph = &a * head.covariance() * a.transpose() + &k * k.transpose() * noise;
        chol = cholesky_lower(&joseph).ok_or(Error::NotPositiveDefinite("recursive update"))?;
    }
    let mut out = head.clone();
    out.set_mu_chol(mu, chol);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerConfig {
    pub gamma: f64,
    pub use_ema: bool,
    pub ema_decay: f64,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            gamma: -4.0,
            use_ema: false,
            ema_decay: 0.5,
        }
    }
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_decay > 0.0 && self.ema_decay <= 1.0) {
            return Err(Error::Config(format!("ema_decay {} not in (0, 1]", self.ema_decay)));
        }
        if self.gamma.is_nan() {
            return Err(Error::Config("gamma is NaN".into()));
        }
        Ok(())
    }
}

/// Smoothed log-likelihood; `None` until the first observation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TriggerState {
    pub ema: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerDecision {
    pub finetune: bool,
    /// The value compared against γ.
    pub tracked: f64,
    pub state: TriggerState,
}

/// Fine-tune iff the tracked log-likelihood drops below γ. The first EMA
/// observation seeds the average.
pub fn should_finetune(cfg: &TriggerConfig, state: &TriggerState, log_pred: f64) -> TriggerDecision {
    let tracked = if cfg.use_ema {
        match state.ema {
            Some(prev) => (1.0 - cfg.ema_decay) * prev + cfg.ema_decay * log_pred,
            None => log_pred,
        }
    } else {
        log_pred
    };
    let state = TriggerState {
        ema: cfg.use_ema.then_some(tracked),
    };
    TriggerDecision {
        finetune: tracked.is_nan() || tracked < cfg.gamma,
        tracked,
        state,
    }
}

/// Backbone features keyed by the exact bits of the encoded input.
#[derive(Debug, Clone, Default)]
pub struct FeatureCache {
    enabled: bool,
    generation: u64,
    entries: HashMap<Vec<u64>, Vec<f64>>,
    hits: u64,
    misses: u64,
}

fn key_of(encoded: &[f64]) -> Vec<u64> {
    encoded.iter().map(|v| v.to_bits()).collect()
}

impl FeatureCache {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            ..Self::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    /// Drops every entry; called whenever the backbone changes.
    pub fn bump_generation(&mut self) {
        self.generation += 1;
        self.entries.clear();
    }

    pub fn get(&self, encoded: &[f64]) -> Option<&[f64]> {
        self.entries.get(&key_of(encoded)).map(Vec::as_slice)
    }

    pub fn insert(&mut self, encoded: &[f64], phi: Vec<f64>) {
        if self.enabled {
            self.entries.insert(key_of(encoded), phi);
        }
    }

    pub fn get_or_compute(&mut self, bb: &Backbone, encoded: &[f64]) -> Result<Vec<f64>> {
        if self.enabled {
            if let Some(phi) = self.entries.get(&key_of(encoded)) {
                self.hits += 1;
                return Ok(phi.clone());
            }
        }
        self.misses += 1;
        let phi = bb.forward(encoded)?;
        self.insert(encoded, phi.clone());
        Ok(phi)
    }
}

const VBFC_MAGIC: &[u8; 4] = b"VBFC";
const VBFC_VERSION: u8 = 1;

/// Externally computed features: one vector per numeric id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub dim: usize,
    pub records: Vec<(u32, Vec<f64>)>,
}

impl FeatureFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dim = u32::try_from(self.dim).map_err(|_| Error::FeatureFile("dim exceeds u32".into()))?;
        let count = u32::try_from(self.records.len()).map_err(|_| Error::FeatureFile("too many records".into()))?;
        let mut out = Vec::with_capacity(13 + self.records.len() * (4 + 8 * self.dim));
        out.extend_from_slice(VBFC_MAGIC);
        out.push(VBFC_VERSION);
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        for (id, v) in &self.records {
            if v.len() != self.dim {
                return Err(Error::FeatureFile(format!(
                    "record {id} has {} values, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            out.extend_from_slice(&id.to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != VBFC_MAGIC {
            return Err(Error::FeatureFile("bad magic".into()));
        }
        if bytes[4] != VBFC_VERSION {
            return Err(Error::FeatureFile(format!("unsupported version {}", bytes[4])));
        }
        let header = bytes
            .get(5..13)
            .ok_or_else(|| Error::FeatureFile("truncated header".into()))?;
        let count = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(header[4..].try_into().unwrap()) as usize;
        let record = 4 + 8 * dim;
        let expected = count
            .checked_mul(record)
            .and_then(|n| n.checked_add(13))
            .ok_or_else(|| Error::FeatureFile("size overflow".into()))?;
        if bytes.len() < expected {
            return Err(Error::FeatureFile(format!(
                "truncated payload: {} of {expected} bytes",
                bytes.len()
            )));
        }
        if bytes.len() > expected {
            return Err(Error::FeatureFile("trailing bytes after payload".into()));
        }
        let records = bytes[13..]
            .chunks_exact(record)
            .map(|r| {
                let id = u32::from_le_bytes(r[..4].try_into().unwrap());
                let v = r[4..]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                (id, v)
            })
            .collect();
        Ok(Self { dim, records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, id: u32) -> Option<&[f64]> {
        self.records.iter().find(|(i, _)| *i == id).map(|(_, v)| v.as_slice())
    }
}

/// Sidecar mapping external string identifiers to record ids.
pub fn read_id_map(path: &Path) -> Result<BTreeMap<String, u32>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::FeatureFile(format!("{}: {e}", path.display())))
}

pub fn write_id_map(path: &Path, ids: &BTreeMap<String, u32>) -> Result<()> {
    let text = serde_json::to_string_pretty(ids)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
