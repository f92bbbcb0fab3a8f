//! Ensembles of adapter/last-layer surrogates over a dictionary of ranks.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::head::{elbo, predictive_from_features, train, GaussianPredictive, RegressionData, TrainSchedule, VbllHead};
use crate::linalg::logsumexp;
use crate::recursive::{predictive_log_likelihood, recursive_update, FeatureCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub ranks: Vec<usize>,
    pub prior_var: f64,
    /// Overrides `prior_var` member by member.
    pub member_prior_vars: Option<Vec<f64>>,
    pub init_noise_var: f64,
    pub temperature: f64,
    /// Members share the identity map instead of an adapter network.
    pub bypass_backbone: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            ranks: vec![2, 4, 8, 16],
            prior_var: 100.0,
            member_prior_vars: None,
            init_noise_var: 1e-3,
            temperature: 1.0,
            bypass_backbone: false,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() {
            return Err(Error::Config("rank dictionary is empty".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(self.prior_var > 0.0 && self.init_noise_var > 0.0) {
            return Err(Error::Config("prior and noise variances must be > 0".into()));
        }
        if let Some(v) = &self.member_prior_vars {
            if v.len() != self.ranks.len() || v.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::Config(
                    "member_prior_vars must give one positive value per rank".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub rank: usize,
    /// Initialization seed; also salts the member's training randomness.
    pub seed: u64,
    pub backbone: Backbone,
    pub head: VbllHead,
    pub last_elbo: f64,
    pub cache: FeatureCache,
}

impl EnsembleMember {
    pub fn new(rank: usize, seed: u64, backbone: Backbone, head: VbllHead, cache_enabled: bool) -> Result<Self> {
        if backbone.output_dim() != head.dim() {
            return Err(Error::DimensionMismatch {
                expected: backbone.output_dim(),
                got: head.dim(),
            });
        }
        Ok(Self {
            rank,
            seed,
            backbone,
            head,
            last_elbo: f64::NAN,
            cache: FeatureCache::new(cache_enabled),
        })
    }

    pub fn features(&mut self, encoded: &[f64]) -> Result<Vec<f64>> {
        self.cache.get_or_compute(&self.backbone, encoded)
    }

    pub fn predictive(&mut self, encoded: &[f64], include_noise: bool) -> Result<GaussianPredictive> {
        let phi = self.features(encoded)?;
        predictive_from_features(&self.head, &phi, include_noise)
    }
}

/// Gaussian mixture over members, in standardized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePredictive {
    pub component_weights: Vec<f64>,
    pub component_means: Vec<f64>,
    /// Epistemic variances (no observation noise).
    pub component_variances: Vec<f64>,
    /// Epistemic plus observation noise.
    pub noisy_variances: Vec<f64>,
}

impl MixturePredictive {
    pub fn mean(&self) -> f64 {
        self.component_weights
            .iter()
            .zip(&self.component_means)
            .map(|(w, m)| w * m)
            .sum()
    }

    fn moment(&self, vars: &[f64]) -> f64 {
        let mean = self.mean();
        let second: f64 = self
            .component_weights
            .iter()
            .zip(&self.component_means)
            .zip(vars)
            .map(|((w, m), v)| w * (v + m * m))
            .sum();
        (second - mean * mean).max(0.0)
    }

    /// Variance of the latent function value.
    pub fn variance(&self) -> f64 {
        self.moment(&self.component_variances)
    }

    /// Variance of a new observation.
    pub fn noisy_variance(&self) -> f64 {
        self.moment(&self.noisy_variances)
    }
}

/// `log w_j = log w0_j + ELBO_j / T`, normalized in log space.
pub fn weights_from_elbo(elbos: &[f64], prior_log_weights: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if elbos.len() != prior_log_weights.len() {
        return Err(Error::DimensionMismatch {
            expected: prior_log_weights.len(),
            got: elbos.len(),
        });
    }
    if elbos.iter().any(|e| e.is_nan() || *e == f64::INFINITY) {
        return Err(Error::NonFinite("elbo"));
    }
    let raw: Vec<f64> = elbos
        .iter()
        .zip(prior_log_weights)
        .map(|(e, w)| w + e / temperature)
        .collect();
    let z = logsumexp(&raw);
    if !z.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    Ok(raw.iter().map(|r| r - z).collect())
}

/// Bayes-rule reweighting by per-member predictive log densities.
///
/// Returns the new log weights and the marginal predictive log density
/// `log Σ_j w_j p_j(y)`.
pub fn recursive_weight_update(log_weights: &[f64], log_preds: &[f64]) -> Result<(Vec<f64>, f64)> {
    if log_weights.len() != log_preds.len() {
        return Err(Error::DimensionMismatch {
            expected: log_weights.len(),
            got: log_preds.len(),
        });
    }
    if log_preds.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("log predictive"));
    }
    let joint: Vec<f64> = log_weights.iter().zip(log_preds).map(|(w, p)| w + p).collect();
    let marginal = logsumexp(&joint);
    if !marginal.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    Ok((joint.iter().map(|j| j - marginal).collect(), marginal))
}

fn member_train_seed(run_seed: u64, member_seed: u64) -> u64 {
    run_seed ^ member_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<EnsembleMember>,
    log_weights: Vec<f64>,
    prior_log_weights: Vec<f64>,
    temperature: f64,
}

impl Ensemble {
    /// Uniform prior weights.
    pub fn new(members: Vec<EnsembleMember>, temperature: f64) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature {temperature} must be > 0")));
        }
        let j = members.len();
        let prior = vec![-(j as f64).ln(); j];
        Ok(Self {
            members,
            log_weights: prior.clone(),
            prior_log_weights: prior,
            temperature,
        })
    }

    /// Restores an ensemble exactly, weights included.
    pub fn from_parts(
        members: Vec<EnsembleMember>,
        log_weights: Vec<f64>,
        prior_log_weights: Vec<f64>,
        temperature: f64,
    ) -> Result<Self> {
        let mut ens = Self::new(members, temperature)?;
        for w in [&log_weights, &prior_log_weights] {
            if w.len() != ens.len() {
                return Err(Error::DimensionMismatch {
                    expected: ens.len(),
                    got: w.len(),
                });
            }
        }
        if (logsumexp(&log_weights)).abs() > 1e-9 {
            return Err(Error::DegenerateWeights);
        }
        ens.log_weights = log_weights;
        ens.prior_log_weights = prior_log_weights;
        Ok(ens)
    }

    /// One member per rank; member `j` is initialized from `seed + j`.
    pub fn init(backbone: &BackboneConfig, cfg: &EnsembleConfig, cache_enabled: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut members = Vec::with_capacity(cfg.ranks.len());
        for (j, &rank) in cfg.ranks.iter().enumerate() {
            let member_seed = seed.wrapping_add(j as u64);
            let bb = if cfg.bypass_backbone {
                Backbone::identity(backbone.input_dim)
            } else {
                Backbone::init(
                    &BackboneConfig {
                        rank,
                        ..backbone.clone()
                    },
                    member_seed,
                )?
            };
            let prior_var = cfg.member_prior_vars.as_ref().map_or(cfg.prior_var, |v| v[j]);
            let head = VbllHead::new(bb.output_dim(), prior_var, cfg.init_noise_var)?;
            members.push(EnsembleMember::new(rank, member_seed, bb, head, cache_enabled)?);
        }
        Self::new(members, cfg.temperature)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [EnsembleMember] {
        &mut self.members
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn prior_log_weights(&self) -> &[f64] {
        &self.prior_log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn set_log_weights(&mut self, log_weights: Vec<f64>) -> Result<()> {
        if log_weights.len() != self.members.len() {
            return Err(Error::DimensionMismatch {
                expected: self.members.len(),
                got: log_weights.len(),
            });
        }
        let z = logsumexp(&log_weights);
        if !z.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        self.log_weights = log_weights.iter().map(|w| w - z).collect();
        Ok(())
    }

    pub fn mixture_predictive(&mut self, encoded: &[f64]) -> Result<MixturePredictive> {
        let mut out = MixturePredictive {
            component_weights: self.weights(),
            component_means: Vec::with_capacity(self.len()),
            component_variances: Vec::with_capacity(self.len()),
            noisy_variances: Vec::with_capacity(self.len()),
        };
        for m in &mut self.members {
            let p = m.predictive(encoded, false)?;
            out.component_means.push(p.mean);
            out.component_variances.push(p.variance);
            out.noisy_variances.push(p.variance + m.head.noise_var());
        }
        Ok(out)
    }

    pub fn member_log_predictives(&mut self, encoded: &[f64], y_std: f64) -> Result<Vec<f64>> {
        self.members
            .iter_mut()
            .map(|m| {
                let phi = m.features(encoded)?;
                predictive_log_likelihood(&m.head, &phi, y_std)
            })
            .collect()
    }

    /// Conditions every member on `(x, y)` and reweights by the members'
    /// predictive densities before the update. Returns the marginal predictive
    /// log density of `y`.
    pub fn recursive_member_updates(&mut self, encoded: &[f64], y_std: f64) -> Result<f64> {
        let mut log_preds = Vec::with_capacity(self.len());
        let mut heads = Vec::with_capacity(self.len());
        for m in &mut self.members {
            let phi = m.features(encoded)?;
            log_preds.push(predictive_log_likelihood(&m.head, &phi, y_std)?);
            heads.push(recursive_update(&m.head, &phi, y_std)?);
        }
        let (log_weights, marginal) = recursive_weight_update(&self.log_weights, &log_preds)?;
        for (m, h) in self.members.iter_mut().zip(heads) {
            m.head = h;
        }
        self.log_weights = log_weights;
        Ok(marginal)
    }

    /// Retrains every member on the full dataset, then reweights by ELBO.
    pub fn finetune_all(&mut self, data: &RegressionData, schedule: &TrainSchedule, seed: u64) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for m in &mut self.members {
            let report = train(
                data,
                &mut m.backbone,
                &mut m.head,
                schedule,
                member_train_seed(seed, m.seed),
            )?;
            m.last_elbo = report.final_elbo;
            m.cache.bump_generation();
        }
        self.reweight_from_elbo()
    }

    /// Recomputes each member's ELBO at its current parameters and resets the weights from them.
    pub fn refresh_elbos(&mut self, data: &RegressionData) -> Result<()> {
        for m in &mut self.members {
            m.last_elbo = elbo(data, &m.backbone, &m.head)?;
        }
        self.reweight_from_elbo()
    }

    fn reweight_from_elbo(&mut self) -> Result<()> {
        let elbos: Vec<f64> = self.members.iter().map(|m| m.last_elbo).collect();
        self.log_weights = weights_from_elbo(&elbos, &self.prior_log_weights, self.temperature)?;
        Ok(())
    }
}
