//! Variational Bayesian last layer.
//!
//! The regression head `β ~ q(β) = N(μ, Σ)` sits on top of backbone features
//! `φ(x)`, with Gaussian likelihood `y ~ N(φᵀβ, σ_ε²)` and prior
//! `β ~ N(0, σ_β² I)`. Because likelihood and posterior are both Gaussian the
//! ELBO is available in closed form:
//!
//! ```text
//! ELBO = Σ_i [ -½ log(2π σ_ε²) - (y_i - φ_iᵀμ)² / (2σ_ε²) - φ_iᵀ Σ φ_i / (2σ_ε²) ]
//!        - (tr Σ + μᵀμ) / (2σ_β²) + ½ [ d + log |Σ| - d log σ_β² ]
//! ```
//!
//! `Σ = L Lᵀ` is stored through its Cholesky factor, `σ_ε² = exp(log_noise)`.
//! All targets are standardized.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneGradients};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, lower_triangle, LN_2PI};
use crate::optim::{AdamW, AdamWConfig};
use crate::problem::{Dataset, Point};

#[derive(Debug, Clone, PartialEq)]
pub struct VbllHead {
    mu: DVector<f64>,
    chol: DMatrix<f64>,
    log_noise: f64,
    prior_var: f64,
}

impl VbllHead {
    /// Zero mean and covariance `I / d`, the usual VBLL starting point.
    pub fn new(dim: usize, prior_var: f64, noise_var: f64) -> Result<Self> {
        let chol = DMatrix::identity(dim, dim) / (dim as f64).sqrt();
        Self::from_parts(DVector::zeros(dim), chol, noise_var.ln(), prior_var)
    }

    /// The prior itself: zero mean, covariance `σ_β² I`.
    pub fn prior(dim: usize, prior_var: f64, noise_var: f64) -> Result<Self> {
        let chol = DMatrix::identity(dim, dim) * prior_var.sqrt();
        Self::from_parts(DVector::zeros(dim), chol, noise_var.ln(), prior_var)
    }

    pub fn from_parts(mu: DVector<f64>, chol: DMatrix<f64>, log_noise: f64, prior_var: f64) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::InvalidShape("head dimension must be positive".into()));
        }
        if chol.shape() != (d, d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: chol.nrows(),
            });
        }
        if !(prior_var.is_finite() && prior_var > 0.0) {
            return Err(Error::InvalidShape(format!("prior variance {prior_var} must be > 0")));
        }
        if !log_noise.is_finite() {
            return Err(Error::NonFinite("log noise"));
        }
        if mu.iter().chain(chol.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("head parameters"));
        }
        if (0..d).any(|i| chol[(i, i)] <= 0.0) {
            return Err(Error::NotPositiveDefinite("head construction"));
        }
        Ok(Self {
            mu,
            chol: lower_triangle(&chol),
            log_noise,
            prior_var,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn mu_mut(&mut self) -> &mut DVector<f64> {
        &mut self.mu
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_noise(&self) -> f64 {
        self.log_noise
    }

    pub fn set_log_noise(&mut self, log_noise: f64) {
        self.log_noise = log_noise;
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    pub fn set_covariance(&mut self, cov: &DMatrix<f64>) -> Result<()> {
        let l = cholesky_lower(cov).ok_or(Error::NotPositiveDefinite("set_covariance"))?;
        self.set_chol(l)
    }

    pub fn set_chol(&mut self, chol: DMatrix<f64>) -> Result<()> {
        let d = self.dim();
        if chol.shape() != (d, d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: chol.nrows(),
            });
        }
        if (0..d).any(|i| !(chol[(i, i)] > 0.0)) {
            return Err(Error::NotPositiveDefinite("set_chol"));
        }
        self.chol = lower_triangle(&chol);
        Ok(())
    }

    pub(crate) fn set_mu_chol(&mut self, mu: DVector<f64>, chol: DMatrix<f64>) {
        self.mu = mu;
        self.chol = chol;
    }

    pub fn is_positive_definite(&self) -> bool {
        (0..self.dim()).all(|i| self.chol[(i, i)] > 0.0)
    }
}

/// Encoded inputs (one row each) with standardized targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    inputs: DMatrix<f64>,
    ys: DVector<f64>,
}

impl RegressionData {
    pub fn new(inputs: DMatrix<f64>, ys: DVector<f64>) -> Result<Self> {
        if inputs.nrows() != ys.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.nrows(),
                got: ys.len(),
            });
        }
        if ys.iter().any(|y| !y.is_finite()) {
            return Err(Error::NonFinite("targets"));
        }
        Ok(Self { inputs, ys })
    }

    pub fn from_rows(rows: &[Vec<f64>], ys: &[f64]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidShape("ragged input rows".into()));
        }
        let inputs = DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]);
        Self::new(inputs, DVector::from_column_slice(ys))
    }

    /// Encodes every observation with `encode`, using its standardized target.
    pub fn from_dataset(ds: &Dataset, mut encode: impl FnMut(&Point) -> Result<Vec<f64>>) -> Result<Self> {
        let rows = ds
            .observations()
            .iter()
            .map(|o| encode(&o.point))
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(&rows, &ds.ys_std())
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn ys(&self) -> &DVector<f64> {
        &self.ys
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        (self.inputs.select_rows(idx), self.ys.select_rows(idx))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPredictive {
    pub mean: f64,
    pub variance: f64,
    pub noise_included: bool,
}

impl GaussianPredictive {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Maps from standardized to raw target units.
    pub fn destandardize(&self, y_mean: f64, y_scale: f64) -> Self {
        Self {
            mean: self.mean * y_scale + y_mean,
            variance: self.variance * y_scale * y_scale,
            noise_included: self.noise_included,
        }
    }
}

pub fn predictive_from_features(head: &VbllHead, phi: &[f64], include_noise: bool) -> Result<GaussianPredictive> {
    if phi.len() != head.dim() {
        return Err(Error::DimensionMismatch {
            expected: head.dim(),
            got: phi.len(),
        });
    }
    let phi = DVector::from_column_slice(phi);
    let mean = phi.dot(&head.mu);
    let lt_phi = head.chol.tr_mul(&phi);
    let mut variance = lt_phi.norm_squared();
    if include_noise {
        variance += head.noise_var();
    }
    Ok(GaussianPredictive {
        mean,
        variance,
        noise_included: include_noise,
    })
}

/// Predictive at one encoded input, in standardized units.
pub fn predictive(bb: &Backbone, head: &VbllHead, input: &[f64], include_noise: bool) -> Result<GaussianPredictive> {
    let phi = bb.forward(input)?;
    predictive_from_features(head, &phi, include_noise)
}

fn check_features(phi: &DMatrix<f64>, ys: &DVector<f64>, head: &VbllHead) -> Result<()> {
    if phi.ncols() != head.dim() {
        return Err(Error::DimensionMismatch {
            expected: head.dim(),
            got: phi.ncols(),
        });
    }
    if phi.nrows() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: phi.nrows(),
            got: ys.len(),
        });
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features"));
    }
    Ok(())
}

/// ELBO value and its gradients with respect to μ, L, log σ_ε² and the features.
struct ElboTerms {
    value: f64,
    d_mu: DVector<f64>,
    d_chol: DMatrix<f64>,
    d_log_noise: f64,
    d_features: DMatrix<f64>,
}

/// `data_weight` rescales the likelihood sum (N / batch size for mini-batches).
fn elbo_terms(phi: &DMatrix<f64>, ys: &DVector<f64>, head: &VbllHead, data_weight: f64, want_grads: bool) -> ElboTerms {
    let d = head.dim() as f64;
    let n = phi.nrows() as f64;
    let noise = head.noise_var();
    let s = head.prior_var;
    let l = &head.chol;

    let resid = ys - phi * &head.mu;
    let m = phi * l;
    let quad: f64 = m.norm_squared();
    let sq: f64 = resid.norm_squared();
    let data = data_weight * (-0.5 * n * (LN_2PI + head.log_noise) - (sq + quad) / (2.0 * noise));

    let tr = l.norm_squared();
    let mu_sq = head.mu.norm_squared();
    let log_det: f64 = 2.0 * (0..head.dim()).map(|i| l[(i, i)].ln()).sum::<f64>();
    let neg_kl = -(tr + mu_sq) / (2.0 * s) + 0.5 * (d + log_det - d * s.ln());
    let value = data + neg_kl;

    if !want_grads {
        return ElboTerms {
            value,
            d_mu: DVector::zeros(0),
            d_chol: DMatrix::zeros(0, 0),
            d_log_noise: 0.0,
            d_features: DMatrix::zeros(0, 0),
        };
    }

    let d_mu = phi.tr_mul(&resid) * (data_weight / noise) - &head.mu / s;
    let mut d_chol = phi.tr_mul(&m) * (-data_weight / noise) - l / s;
    d_chol.fill_upper_triangle(0.0, 1);
    for i in 0..head.dim() {
        d_chol[(i, i)] += 1.0 / l[(i, i)];
    }
    let d_log_noise = data_weight * (-0.5 * n + (sq + quad) / (2.0 * noise));
    let d_features = (&resid * head.mu.transpose() - &m * l.transpose()) * (data_weight / noise);
    ElboTerms {
        value,
        d_mu,
        d_chol,
        d_log_noise,
        d_features,
    }
}

/// ELBO for fixed features (rows of `phi`).
pub fn elbo_from_features(phi: &DMatrix<f64>, ys: &DVector<f64>, head: &VbllHead) -> Result<f64> {
    check_features(phi, ys, head)?;
    Ok(elbo_terms(phi, ys, head, 1.0, false).value)
}

pub fn elbo(data: &RegressionData, bb: &Backbone, head: &VbllHead) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let phi = bb.forward_batch(&data.inputs)?;
    elbo_from_features(&phi, &data.ys, head)
}

/// Exact ELBO gradients (ascent direction).
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradients {
    pub mu: DVector<f64>,
    /// With respect to the lower-triangular Cholesky factor; strict upper triangle is zero.
    pub chol: DMatrix<f64>,
    pub log_noise: f64,
    pub backbone: BackboneGradients,
}

/// ELBO value and exact gradients; the backbone runs deterministically (no dropout).
pub fn elbo_gradients(data: &RegressionData, bb: &Backbone, head: &VbllHead) -> Result<(f64, ElboGradients)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tape = bb.forward_tape(&data.inputs, None::<&mut ChaCha8Rng>)?;
    check_features(tape.output(), &data.ys, head)?;
    let t = elbo_terms(tape.output(), &data.ys, head, 1.0, true);
    let backbone = bb.backward(&tape, &t.d_features)?;
    Ok((
        t.value,
        ElboGradients {
            mu: t.d_mu,
            chol: t.d_chol,
            log_noise: t.d_log_noise,
            backbone,
        },
    ))
}

/// Two-phase training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    /// Squared-error warm-up epochs over μ and the noise only.
    pub phase1_epochs: usize,
    /// Full ELBO epochs over every parameter.
    pub phase2_epochs: usize,
    pub phase1: AdamWConfig,
    pub phase2: AdamWConfig,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub train_adapters: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            phase1_epochs: 500,
            phase2_epochs: 1000,
            phase1: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            phase2: AdamWConfig::default(),
            batch_size: None,
            train_adapters: true,
        }
    }
}

impl TrainSchedule {
    pub fn none() -> Self {
        Self {
            phase1_epochs: 0,
            phase2_epochs: 0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_elbo: f64,
    pub final_elbo: f64,
}

const BLOCK_MU: usize = 0;
const BLOCK_CHOL: usize = 1;
const BLOCK_NOISE: usize = 2;
const BLOCK_BACKBONE: usize = 3;

/// Packs the free parameters of L: off-diagonals as is, diagonals as logs.
fn pack_chol(l: &DMatrix<f64>) -> Vec<f64> {
    let d = l.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for j in 0..d {
        out.push(l[(j, j)].ln());
        for i in (j + 1)..d {
            out.push(l[(i, j)]);
        }
    }
    out
}

fn unpack_chol(raw: &[f64], d: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(d, d);
    let mut k = 0;
    for j in 0..d {
        l[(j, j)] = raw[k].exp();
        k += 1;
        for i in (j + 1)..d {
            l[(i, j)] = raw[k];
            k += 1;
        }
    }
    l
}

/// Loss gradient for the packed parameters given the ELBO gradient w.r.t. L.
fn pack_chol_loss_grad(d_chol: &DMatrix<f64>, l: &DMatrix<f64>) -> Vec<f64> {
    let d = l.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for j in 0..d {
        out.push(-d_chol[(j, j)] * l[(j, j)]);
        for i in (j + 1)..d {
            out.push(-d_chol[(i, j)]);
        }
    }
    out
}

fn batches(n: usize, batch_size: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    match batch_size {
        Some(b) if b > 0 && b < n => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.chunks(b).map(<[usize]>::to_vec).collect()
        }
        _ => vec![(0..n).collect()],
    }
}

/// Phase 1 fits μ and the noise by Gaussian negative log-likelihood (squared
/// error in μ) on frozen features; phase 2 ascends the full ELBO over μ, L,
/// the noise and (optionally) every adapter. Deterministic given `seed`.
pub fn train(
    data: &RegressionData,
    bb: &mut Backbone,
    head: &mut VbllHead,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let initial_elbo = elbo(data, bb, head)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.len();

    if schedule.phase1_epochs > 0 {
        let phi = bb.forward_batch(&data.inputs)?;
        check_features(&phi, &data.ys, head)?;
        let mut opt = AdamW::new(schedule.phase1);
        let mut noise = [head.log_noise];
        for _ in 0..schedule.phase1_epochs {
            for idx in batches(n, schedule.batch_size, &mut rng) {
                let (p, y) = (phi.select_rows(&idx), data.ys.select_rows(&idx));
                let nb = idx.len() as f64;
                let var = noise[0].exp();
                let resid = &y - &p * &head.mu;
                let g_mu = p.tr_mul(&resid) * (-1.0 / (nb * var));
                let g_noise = [0.5 - resid.norm_squared() / (2.0 * nb * var)];
                opt.begin_step();
                opt.update(BLOCK_MU, head.mu.as_mut_slice(), g_mu.as_slice());
                opt.update(BLOCK_NOISE, &mut noise, &g_noise);
            }
        }
        head.log_noise = noise[0];
    }

    if schedule.phase2_epochs > 0 {
        let d = head.dim();
        let mut opt = AdamW::new(schedule.phase2);
        let mut raw_chol = pack_chol(&head.chol);
        let mut noise = [head.log_noise];
        let use_dropout = bb.dropout() > 0.0 && schedule.train_adapters;
        for _ in 0..schedule.phase2_epochs {
            for idx in batches(n, schedule.batch_size, &mut rng) {
                let (xs, ys) = if idx.len() == n {
                    (data.inputs.clone(), data.ys.clone())
                } else {
                    data.rows(&idx)
                };
                let tape = if use_dropout {
                    bb.forward_tape(&xs, Some(&mut rng))?
                } else {
                    bb.forward_tape(&xs, None::<&mut ChaCha8Rng>)?
                };
                check_features(tape.output(), &ys, head)?;
                let weight = n as f64 / idx.len() as f64;
                let t = elbo_terms(tape.output(), &ys, head, weight, true);
                opt.begin_step();
                let g_mu = -&t.d_mu;
                opt.update(BLOCK_MU, head.mu.as_mut_slice(), g_mu.as_slice());
                let g_chol = pack_chol_loss_grad(&t.d_chol, &head.chol);
                opt.update(BLOCK_CHOL, &mut raw_chol, &g_chol);
                opt.update(BLOCK_NOISE, &mut noise, &[-t.d_log_noise]);
                if schedule.train_adapters && bb.has_adapters() {
                    let mut g = bb.backward(&tape, &t.d_features)?;
                    g.scale_mut(-1.0);
                    bb.apply_gradient_step(&g, &mut opt, BLOCK_BACKBONE)?;
                }
                head.chol = unpack_chol(&raw_chol, d);
                head.log_noise = noise[0];
            }
        }
        if !head.is_positive_definite() || head.mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite("training"));
        }
    }

    let final_elbo = elbo(data, bb, head)?;
    Ok(TrainReport {
        initial_elbo,
        final_elbo,
    })
}

/// Exact Gaussian posterior of Bayesian linear regression, by dense factorization:
/// `Σ* = (ΦᵀΦ/σ_ε² + I/σ_β²)⁻¹`, `μ* = Σ* Φᵀ y / σ_ε²`.
pub fn conjugate_blr_posterior(
    phi: &DMatrix<f64>,
    ys: &DVector<f64>,
    prior_var: f64,
    noise_var: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if phi.nrows() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: phi.nrows(),
            got: ys.len(),
        });
    }
    if phi.iter().chain(ys.iter()).any(|v| !v.is_finite()) || !(prior_var > 0.0 && noise_var > 0.0) {
        return Err(Error::NonFinite("conjugate posterior inputs"));
    }
    let d = phi.ncols();
    let precision = phi.tr_mul(phi) / noise_var + DMatrix::identity(d, d) / prior_var;
    let chol = nalgebra::Cholesky::new(precision).ok_or(Error::NotPositiveDefinite("conjugate posterior"))?;
    let cov = chol.inverse();
    let mu = chol.solve(&(phi.tr_mul(ys) / noise_var));
    Ok((mu, cov))
}

/// `log N(y; 0, σ_β² ΦΦᵀ + σ_ε² I)`, evaluated densely.
pub fn log_evidence(phi: &DMatrix<f64>, ys: &DVector<f64>, prior_var: f64, noise_var: f64) -> Result<f64> {
    let t = phi.nrows();
    if t == 0 {
        return Err(Error::EmptyDataset);
    }
    if t != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: t,
            got: ys.len(),
        });
    }
    if phi.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("evidence inputs"));
    }
    let k = phi * phi.transpose() * prior_var + DMatrix::identity(t, t) * noise_var;
    let chol = nalgebra::Cholesky::new(k).ok_or(Error::NotPositiveDefinite("evidence kernel"))?;
    let alpha = chol.solve(ys);
    let l = chol.l();
    let half_log_det: f64 = (0..t).map(|i| l[(i, i)].ln()).sum();
    Ok(-0.5 * ys.dot(&alpha) - half_log_det - 0.5 * t as f64 * LN_2PI)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Activation, BackboneConfig};
    use rand::Rng;
    use rand_distr::StandardNormal;

    const HALF_LOG_4PI: f64 = 1.265_512_123_484_645_4;

    fn one_point() -> (DMatrix<f64>, DVector<f64>) {
        (DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 0.0))
    }

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn elbo_at_exact_posterior_one_point() {
        let (phi, ys) = one_point();
        let head =
            VbllHead::from_parts(DVector::zeros(1), DMatrix::from_element(1, 1, 0.5f64.sqrt()), 0.0, 1.0).unwrap();
        let v = elbo_from_features(&phi, &ys, &head).unwrap();
        assert!((v + HALF_LOG_4PI).abs() < 1e-12, "{v}");
    }

    #[test]
    fn elbo_with_q_equal_prior_is_expected_loglik() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = randn(&mut rng, 5, 3);
        let ys = DVector::from_fn(5, |i, _| i as f64 * 0.3);
        let head = VbllHead::prior(3, 2.0, 0.5).unwrap();
        let v = elbo_from_features(&phi, &ys, &head).unwrap();
        let noise: f64 = 0.5;
        let sigma = head.covariance();
        let mut expected = 0.0;
        for i in 0..5 {
            let f = phi.row(i).transpose();
            expected +=
                -0.5 * (LN_2PI + noise.ln()) - ys[i] * ys[i] / (2.0 * noise) - f.dot(&(&sigma * &f)) / (2.0 * noise);
        }
        assert!((v - expected).abs() < 1e-10);
    }

    #[test]
    fn duplicating_data_doubles_data_term_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi = randn(&mut rng, 4, 3);
        let ys = DVector::from_fn(4, |i, _| (i as f64).sin());
        let head = VbllHead::new(3, 4.0, 0.2).unwrap();
        let kl_only = elbo_terms(&DMatrix::zeros(0, 3), &DVector::zeros(0), &head, 1.0, false).value;
        let single = elbo_from_features(&phi, &ys, &head).unwrap();
        let phi2 = DMatrix::from_fn(8, 3, |i, j| phi[(i % 4, j)]);
        let ys2 = DVector::from_fn(8, |i, _| ys[i % 4]);
        let double = elbo_from_features(&phi2, &ys2, &head).unwrap();
        assert!(((double - kl_only) - 2.0 * (single - kl_only)).abs() < 1e-10);
    }

    #[test]
    fn predictive_examples() {
        let head = VbllHead::from_parts(DVector::zeros(1), DMatrix::identity(1, 1), 0.0, 1.0).unwrap();
        let p = predictive_from_features(&head, &[1.0], true).unwrap();
        assert_eq!((p.mean, p.variance), (0.0, 2.0));
        let p = predictive_from_features(&head, &[1.0], false).unwrap();
        assert_eq!(p.variance, 1.0);
        assert!(predictive_from_features(&head, &[1.0, 2.0], true).is_err());
        let d = GaussianPredictive {
            mean: 1.0,
            variance: 4.0,
            noise_included: true,
        }
        .destandardize(3.0, 2.0);
        assert_eq!((d.mean, d.variance), (5.0, 16.0));
    }

    #[test]
    fn conjugate_examples() {
        let (mu, cov) = conjugate_blr_posterior(&DMatrix::zeros(0, 3), &DVector::zeros(0), 2.5, 1.0).unwrap();
        assert_eq!(mu, DVector::zeros(3));
        assert!((cov - DMatrix::identity(3, 3) * 2.5).amax() < 1e-15);

        let (mu, cov) = conjugate_blr_posterior(
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_element(1, 2.0),
            1.0,
            1.0,
        )
        .unwrap();
        assert!((mu[0] - 1.0).abs() < 1e-15 && (cov[(0, 0)] - 0.5).abs() < 1e-15);

        // Orthonormal feature columns decouple the dimensions.
        let phi = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let (_, cov) = conjugate_blr_posterior(&phi, &DVector::from_vec(vec![1.0, -1.0]), 3.0, 0.5).unwrap();
        assert_eq!(cov[(0, 1)], 0.0);
        assert_eq!(cov[(1, 0)], 0.0);
    }

    #[test]
    fn log_evidence_examples() {
        let (phi, ys) = one_point();
        assert!((log_evidence(&phi, &ys, 1.0, 1.0).unwrap() + HALF_LOG_4PI).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let phi = randn(&mut rng, 6, 2);
        let ys = DVector::from_fn(6, |i, _| 0.5 - i as f64 * 0.2);
        let base = log_evidence(&phi, &ys, 1.5, 0.3).unwrap();
        let zero = log_evidence(&phi, &DVector::zeros(6), 1.5, 0.3).unwrap();
        let scaled = log_evidence(&phi, &(&ys * 3.0), 1.5, 0.3).unwrap();
        // Quadratic term scales with c².
        assert!(((scaled - zero) - 9.0 * (base - zero)).abs() < 1e-10);
    }

    #[test]
    fn elbo_bounded_by_evidence_and_tight_at_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let t = rng.random_range(1..=20);
            let d = rng.random_range(1..=8);
            let phi = randn(&mut rng, t, d);
            let ys = DVector::from_fn(t, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (s, noise) = (rng.random_range(0.5..5.0), rng.random_range(0.05..2.0));
            let ev = log_evidence(&phi, &ys, s, noise).unwrap();
            let (mu, cov) = conjugate_blr_posterior(&phi, &ys, s, noise).unwrap();
            let mut head = VbllHead::from_parts(mu, DMatrix::identity(d, d), noise.ln(), s).unwrap();
            head.set_covariance(&cov).unwrap();
            assert!((elbo_from_features(&phi, &ys, &head).unwrap() - ev).abs() < 1e-6);
            for _ in 0..20 {
                let mu = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let mut l = lower_triangle(&randn(&mut rng, d, d));
                for i in 0..d {
                    l[(i, i)] = l[(i, i)].abs() + 0.05;
                }
                let h = VbllHead::from_parts(mu, l, noise.ln(), s).unwrap();
                assert!(elbo_from_features(&phi, &ys, &h).unwrap() <= ev + 1e-9);
            }
        }
    }

    fn fixed_feature_data(n: usize, seed: u64) -> RegressionData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = randn(&mut rng, n, 3);
        let ys = DVector::from_fn(n, |i, _| {
            xs[(i, 0)] - 0.5 * xs[(i, 2)] + 0.1 * rng.sample::<f64, _>(StandardNormal)
        });
        RegressionData::new(xs, ys).unwrap()
    }

    #[test]
    fn gradients_vanish_at_conjugate_posterior() {
        let data = fixed_feature_data(15, 5);
        let bb = Backbone::identity(3);
        let (mu, cov) = conjugate_blr_posterior(data.inputs(), data.ys(), 2.0, 0.3).unwrap();
        let mut head = VbllHead::from_parts(mu, DMatrix::identity(3, 3), 0.3f64.ln(), 2.0).unwrap();
        head.set_covariance(&cov).unwrap();
        let (_, g) = elbo_gradients(&data, &bb, &head).unwrap();
        assert!(g.mu.amax() < 1e-8, "{}", g.mu);
        assert!(g.chol.amax() < 1e-8, "{}", g.chol);
    }

    #[test]
    fn zero_b_gives_zero_adapter_a_gradients() {
        let cfg = BackboneConfig {
            input_dim: 4,
            hidden: vec![6],
            output_dim: 3,
            rank: 2,
            dropout: 0.0,
            ..Default::default()
        };
        let bb = Backbone::init(&cfg, 0).unwrap();
        let data =
            RegressionData::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![1.0, 0.0, -1.0, 0.5]], &[0.3, -0.2]).unwrap();
        let mut head = VbllHead::new(3, 1.0, 0.5).unwrap();
        head.mu_mut().fill(0.4);
        let (_, g) = elbo_gradients(&data, &bb, &head).unwrap();
        assert!(g.backbone.layers.iter().all(|l| l.da.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_epochs_leave_head_unchanged() {
        let data = fixed_feature_data(10, 6);
        let mut bb = Backbone::identity(3);
        let mut head = VbllHead::new(3, 100.0, 1e-3).unwrap();
        let before = head.clone();
        let report = train(&data, &mut bb, &mut head, &TrainSchedule::none(), 0).unwrap();
        assert_eq!(head, before);
        assert_eq!(report.initial_elbo, report.final_elbo);
        assert!(matches!(
            train(
                &RegressionData::from_rows(&[], &[]).unwrap(),
                &mut bb,
                &mut head,
                &TrainSchedule::none(),
                0
            ),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn training_recovers_conjugate_mean_on_fixed_features() {
        // y = 2 φ(x) + noise with a scalar feature, 50 points.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs = DMatrix::from_fn(50, 1, |_, _| rng.random_range(-1.0..1.0));
        let ys = DVector::from_fn(50, |i, _| 2.0 * xs[(i, 0)] + 0.1 * rng.sample::<f64, _>(StandardNormal));
        let data = RegressionData::new(xs, ys).unwrap();
        let mut bb = Backbone::identity(1);
        let mut head = VbllHead::new(1, 100.0, 1e-2).unwrap();
        let schedule = TrainSchedule {
            phase1_epochs: 500,
            phase2_epochs: 6000,
            phase2: AdamWConfig {
                lr: 1e-2,
                weight_decay: 0.0,
                ..Default::default()
            },
            train_adapters: false,
            ..Default::default()
        };
        train(&data, &mut bb, &mut head, &schedule, 0).unwrap();
        let (mu_star, _) = conjugate_blr_posterior(data.inputs(), data.ys(), 100.0, head.noise_var()).unwrap();
        assert!(
            (head.mu()[0] - mu_star[0]).abs() < 1e-3,
            "{} vs {}",
            head.mu()[0],
            mu_star[0]
        );
        assert!(head.is_positive_definite());
    }

    #[test]
    fn full_batch_elbo_improves_with_small_lr() {
        let cfg = BackboneConfig {
            input_dim: 3,
            hidden: vec![8],
            output_dim: 4,
            rank: 2,
            dropout: 0.0,
            activation: Activation::Tanh,
            ..Default::default()
        };
        let mut bb = Backbone::init(&cfg, 1).unwrap();
        let data = fixed_feature_data(20, 8);
        let mut head = VbllHead::new(4, 100.0, 1e-1).unwrap();
        let schedule = TrainSchedule {
            phase1_epochs: 0,
            phase2_epochs: 200,
            phase2: AdamWConfig {
                lr: 1e-4,
                ..Default::default()
            },
            ..Default::default()
        };
        let r = train(&data, &mut bb, &mut head, &schedule, 0).unwrap();
        assert!(r.final_elbo >= r.initial_elbo);
        assert!(head.is_positive_definite());
    }

    #[test]
    fn training_is_deterministic_with_dropout() {
        let cfg = BackboneConfig {
            input_dim: 3,
            hidden: vec![8],
            output_dim: 4,
            rank: 2,
            dropout: 0.1,
            ..Default::default()
        };
        let data = fixed_feature_data(12, 9);
        let run = || {
            let mut bb = Backbone::init(&cfg, 2).unwrap();
            let mut head = VbllHead::new(4, 100.0, 1e-3).unwrap();
            let s = TrainSchedule {
                phase1_epochs: 20,
                phase2_epochs: 30,
                batch_size: Some(5),
                ..Default::default()
            };
            let r = train(&data, &mut bb, &mut head, &s, 42).unwrap();
            (bb, head, r)
        };
        let (b1, h1, r1) = run();
        let (b2, h2, r2) = run();
        assert_eq!(b1, b2);
        assert_eq!(h1, h2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn head_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = BackboneConfig {
            input_dim: 3,
            hidden: vec![5],
            output_dim: 3,
            rank: 2,
            dropout: 0.0,
            activation: Activation::Tanh,
            ..Default::default()
        };
        let mut bb = Backbone::init(&cfg, 3).unwrap();
        for l in bb.layers_mut() {
            let b = randn(&mut rng, l.rank(), l.in_dim()) * 0.3;
            *l.b_mut() = b;
        }
        let data = fixed_feature_data(7, 11);
        let mut l = lower_triangle(&randn(&mut rng, 3, 3));
        for i in 0..3 {
            l[(i, i)] = l[(i, i)].abs() + 0.3;
        }
        let head = VbllHead::from_parts(DVector::from_vec(vec![0.2, -0.4, 0.1]), l, (0.4f64).ln(), 3.0).unwrap();
        let (_, g) = elbo_gradients(&data, &bb, &head).unwrap();
        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            assert!(
                (fd - analytic).abs() <= 1e-4 * fd.abs().max(analytic.abs()) + 1e-6,
                "{fd} vs {analytic}"
            );
        };
        for i in 0..3 {
            let (mut p, mut m) = (head.clone(), head.clone());
            p.mu[i] += h;
            m.mu[i] -= h;
            check(g.mu[i], elbo(&data, &bb, &p).unwrap(), elbo(&data, &bb, &m).unwrap());
            for j in 0..=i {
                let (mut p, mut m) = (head.clone(), head.clone());
                p.chol[(i, j)] += h;
                m.chol[(i, j)] -= h;
                check(
                    g.chol[(i, j)],
                    elbo(&data, &bb, &p).unwrap(),
                    elbo(&data, &bb, &m).unwrap(),
                );
            }
        }
        let (mut p, mut m) = (head.clone(), head.clone());
        p.log_noise += h;
        m.log_noise -= h;
        check(
            g.log_noise,
            elbo(&data, &bb, &p).unwrap(),
            elbo(&data, &bb, &m).unwrap(),
        );
        let layer = 0;
        let (r, c) = (1, 2);
        let mut bp = bb.clone();
        bp.layers_mut()[layer].a_mut()[(r, c)] += h;
        let mut bm = bb.clone();
        bm.layers_mut()[layer].a_mut()[(r, c)] -= h;
        check(
            g.backbone.layers[layer].da[(r, c)],
            elbo(&data, &bp, &head).unwrap(),
            elbo(&data, &bm, &head).unwrap(),
        );
    }

    #[test]
    fn packing_round_trips() {
        let l = DMatrix::from_row_slice(3, 3, &[1.5, 0.0, 0.0, -0.2, 0.7, 0.0, 0.3, 0.1, 2.0]);
        let back = unpack_chol(&pack_chol(&l), 3);
        assert!((back - l).amax() < 1e-15);
    }
}
