//! Thompson sampling over the ensemble, maximized by pool enumeration or by
//! trust-region hill climbing.

use std::collections::HashSet;

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::problem::{encode_point, validate_point, Point, SearchSpace, Value, VariableSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct ThompsonDraw {
    pub member: usize,
    pub beta: Vec<f64>,
}

/// Picks a member by weight, then samples its head: `β = μ + L z`.
pub fn thompson_draw<R: Rng + ?Sized>(ens: &Ensemble, rng: &mut R) -> Result<ThompsonDraw> {
    let member = if ens.len() == 1 {
        0
    } else {
        WeightedIndex::new(ens.weights())
            .map_err(|_| Error::DegenerateWeights)?
            .sample(rng)
    };
    let head = &ens.members()[member].head;
    let z = DVector::from_fn(head.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let beta = head.mu() + head.chol() * z;
    Ok(ThompsonDraw {
        member,
        beta: beta.as_slice().to_vec(),
    })
}

/// `φ_j(x)ᵀ β` for the drawn member.
pub fn score(draw: &ThompsonDraw, ens: &mut Ensemble, encoded: &[f64]) -> Result<f64> {
    let member = ens.members_mut().get_mut(draw.member).ok_or(Error::DimensionMismatch {
        expected: draw.member + 1,
        got: 0,
    })?;
    let phi = member.features(encoded)?;
    if phi.len() != draw.beta.len() {
        return Err(Error::DimensionMismatch {
            expected: phi.len(),
            got: draw.beta.len(),
        });
    }
    Ok(phi.iter().zip(&draw.beta).map(|(a, b)| a * b).sum())
}

/// Index of the best-scoring pool entry outside `exclude`; ties go to the lowest index.
pub fn propose_from_pool(
    draw: &ThompsonDraw,
    ens: &mut Ensemble,
    pool: &[Vec<f64>],
    exclude: &HashSet<usize>,
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in pool.iter().enumerate() {
        if exclude.contains(&i) {
            continue;
        }
        let s = score(draw, ens, x)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::PoolExhausted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrustRegionConfig {
    /// Defaults to `max(1, n_x / 5)`.
    pub initial_radius: Option<usize>,
    pub initial_box: f64,
    pub succ_tol: usize,
    /// Defaults to `max(4, n_x)`.
    pub fail_tol: Option<usize>,
    pub min_radius: usize,
    /// Defaults to the number of categorical dimensions.
    pub max_radius: Option<usize>,
    pub min_box: f64,
    /// Cap on hill-climbing moves per proposal.
    pub max_rounds: usize,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            initial_radius: None,
            initial_box: 0.8,
            succ_tol: 3,
            fail_tol: None,
            min_radius: 1,
            max_radius: None,
            min_box: 1e-3,
            max_rounds: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustRegion {
    pub center: Point,
    pub hamming_radius: usize,
    pub box_length: f64,
    pub succ_count: usize,
    pub fail_count: usize,
    pub succ_tol: usize,
    pub fail_tol: usize,
    pub min_radius: usize,
    pub max_radius: usize,
    pub min_box: f64,
    pub initial_radius: usize,
    pub initial_box: f64,
    has_categorical: bool,
}

impl TrustRegion {
    pub fn new(space: &SearchSpace, center: Point, cfg: &TrustRegionConfig) -> Result<Self> {
        validate_point(space, &center)?;
        let n_x = space.dim();
        let n_cat = space.categorical_dims().count();
        let max_radius = cfg.max_radius.unwrap_or(n_cat).max(1);
        let min_radius = cfg.min_radius.max(1);
        if min_radius > max_radius {
            return Err(Error::Config(format!(
                "min_radius {min_radius} exceeds max_radius {max_radius}"
            )));
        }
        if !(cfg.initial_box > 0.0 && cfg.initial_box <= 1.0 && cfg.min_box > 0.0 && cfg.min_box <= cfg.initial_box) {
            return Err(Error::Config(
                "trust-region box lengths must satisfy 0 < min_box <= initial_box <= 1".into(),
            ));
        }
        if cfg.succ_tol == 0 || cfg.fail_tol == Some(0) {
            return Err(Error::Config("trust-region tolerances must be positive".into()));
        }
        let initial_radius = cfg
            .initial_radius
            .unwrap_or((n_x / 5).max(1))
            .clamp(min_radius, max_radius);
        Ok(Self {
            center,
            hamming_radius: initial_radius,
            box_length: cfg.initial_box,
            succ_count: 0,
            fail_count: 0,
            succ_tol: cfg.succ_tol,
            fail_tol: cfg.fail_tol.unwrap_or(n_x.max(4)),
            min_radius,
            max_radius,
            min_box: cfg.min_box,
            initial_radius,
            initial_box: cfg.initial_box,
            has_categorical: n_cat > 0,
        })
    }

    /// Does `p` lie within the region around the center?
    pub fn contains(&self, space: &SearchSpace, p: &Point) -> bool {
        if self.center.hamming(p) > self.hamming_radius {
            return false;
        }
        space.continuous_dims().all(|(i, lo, hi)| {
            let (c, x) = (self.center.real(i).unwrap_or(lo), p.real(i).unwrap_or(f64::NAN));
            let (a, b) = box_bounds(c, lo, hi, self.box_length);
            (a..=b).contains(&x)
        })
    }

    /// Re-centers at `center` with the initial radius and box.
    pub fn restart(&mut self, center: Point) {
        self.center = center;
        self.hamming_radius = self.initial_radius;
        self.box_length = self.initial_box;
        self.succ_count = 0;
        self.fail_count = 0;
    }

    fn at_minimum(&self) -> bool {
        if self.has_categorical {
            self.hamming_radius <= self.min_radius
        } else {
            self.box_length <= self.min_box
        }
    }
}

/// Success/failure bookkeeping; returns `true` when the region should restart.
pub fn tr_adapt(tr: &mut TrustRegion, improved: bool) -> bool {
    if improved {
        tr.succ_count += 1;
        tr.fail_count = 0;
        if tr.succ_count >= tr.succ_tol {
            tr.hamming_radius = (2 * tr.hamming_radius).min(tr.max_radius);
            tr.box_length = (2.0 * tr.box_length).min(1.0);
            tr.succ_count = 0;
        }
        return false;
    }
    tr.fail_count += 1;
    tr.succ_count = 0;
    if tr.fail_count < tr.fail_tol {
        return false;
    }
    tr.fail_count = 0;
    if tr.at_minimum() {
        return true;
    }
    tr.hamming_radius = (tr.hamming_radius / 2).max(tr.min_radius);
    tr.box_length = (tr.box_length / 2.0).max(tr.min_box);
    false
}

fn box_bounds(center: f64, lo: f64, hi: f64, box_length: f64) -> (f64, f64) {
    let half = 0.5 * box_length * (hi - lo);
    ((center - half).max(lo), (center + half).min(hi))
}

/// Exact identity of a point, for visited-set bookkeeping.
pub fn point_key(p: &Point) -> Vec<u64> {
    p.values
        .iter()
        .map(|v| match v {
            Value::Category(c) => *c as u64,
            Value::Real(x) => x.to_bits(),
        })
        .collect()
}

fn one_hop_neighbors(space: &SearchSpace, p: &Point) -> Vec<Point> {
    let mut out = Vec::new();
    for (i, card) in space.categorical_dims() {
        let cur = p.category(i).unwrap_or(0);
        for level in (0..card).filter(|&l| l != cur) {
            let mut q = p.clone();
            q.values[i] = Value::Category(level);
            out.push(q);
        }
    }
    out
}

fn random_in_region<R: Rng + ?Sized>(space: &SearchSpace, tr: &TrustRegion, rng: &mut R) -> Point {
    let mut p = tr.center.clone();
    let cats: Vec<(usize, usize)> = space.categorical_dims().filter(|&(_, c)| c > 1).collect();
    if !cats.is_empty() {
        let h = rng.random_range(1..=tr.hamming_radius.min(cats.len()));
        for k in sample_indices(rng, cats.len(), h) {
            let (i, card) = cats[k];
            let cur = p.category(i).unwrap_or(0);
            let mut level = rng.random_range(0..card - 1);
            if level >= cur {
                level += 1;
            }
            p.values[i] = Value::Category(level);
        }
    }
    for (i, lo, hi) in space.continuous_dims() {
        let (a, b) = box_bounds(tr.center.real(i).unwrap_or(lo), lo, hi, tr.box_length);
        p.values[i] = Value::Real(if a < b { rng.random_range(a..=b) } else { a });
    }
    p
}

/// Continuous-only perturbation of `p`, staying in the region's box.
fn jitter_continuous<R: Rng + ?Sized>(space: &SearchSpace, tr: &TrustRegion, p: &Point, rng: &mut R) -> Point {
    let mut q = p.clone();
    for (i, lo, hi) in space.continuous_dims() {
        let (a, b) = box_bounds(tr.center.real(i).unwrap_or(lo), lo, hi, tr.box_length);
        let x = p.real(i).unwrap_or(a);
        let step = 0.1 * (b - a);
        let (a2, b2) = ((x - step).max(a), (x + step).min(b));
        q.values[i] = Value::Real(if a2 < b2 { rng.random_range(a2..=b2) } else { a2 });
    }
    q
}

/// Hill climbs the Thompson sample inside the trust region.
///
/// The first round scores every one-change categorical neighbor of the
/// center together with `budget` random points of the region; later rounds
/// score the in-region one-change neighbors of the current point plus a few
/// local continuous moves. Only strict improvements are accepted. When the
/// climb ends on a point already in `visited`, the best-scoring unvisited
/// candidate seen is returned instead (or a fresh random region point).
#[allow(clippy::too_many_arguments)]
pub fn propose_trust_region<R: Rng + ?Sized>(
    draw: &ThompsonDraw,
    ens: &mut Ensemble,
    space: &SearchSpace,
    tr: &TrustRegion,
    budget: usize,
    visited: &HashSet<Vec<u64>>,
    max_rounds: usize,
    rng: &mut R,
) -> Result<Point> {
    let n_cont = space.continuous_dims().count();
    let mut current = tr.center.clone();
    let mut current_score = score(draw, ens, &encode_point(space, &current)?)?;
    let mut best_fresh: Option<(Point, f64)> = None;
    let consider = |p: &Point, s: f64, best_fresh: &mut Option<(Point, f64)>| {
        if !visited.contains(&point_key(p)) && best_fresh.as_ref().is_none_or(|(_, b)| s > *b) {
            *best_fresh = Some((p.clone(), s));
        }
    };
    consider(&current, current_score, &mut best_fresh);

    for round in 0..max_rounds.max(1) {
        let mut candidates: Vec<Point> = one_hop_neighbors(space, &current)
            .into_iter()
            .filter(|q| tr.center.hamming(q) <= tr.hamming_radius)
            .collect();
        if round == 0 {
            candidates.extend((0..budget).map(|_| random_in_region(space, tr, rng)));
        } else if n_cont > 0 {
            candidates.extend((0..2 * n_cont).map(|_| jitter_continuous(space, tr, &current, rng)));
        }
        let mut best: Option<(usize, f64)> = None;
        for (k, q) in candidates.iter().enumerate() {
            let s = score(draw, ens, &encode_point(space, q)?)?;
            consider(q, s, &mut best_fresh);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        match best {
            Some((k, s)) if s > current_score => {
                current = candidates.swap_remove(k);
                current_score = s;
            }
            _ => break,
        }
    }

    if !visited.contains(&point_key(&current)) {
        return Ok(current);
    }
    if let Some((p, _)) = best_fresh {
        return Ok(p);
    }
    for _ in 0..1000 {
        let p = random_in_region(space, tr, rng);
        if !visited.contains(&point_key(&p)) {
            return Ok(p);
        }
    }
    Ok(current)
}

/// Scrambled Sobol points mapped into the space, deduplicated.
///
/// Categorical coordinates use equal-width bins of the unit interval.
pub fn sobol_pool(space: &SearchSpace, n: usize, seed: u64) -> Result<Vec<Point>> {
    if n == 0 {
        return Err(Error::Config("pool size must be >= 1".into()));
    }
    let dims = space.dim();
    if dims as u32 > sobol_burley::NUM_DIMENSIONS {
        return Err(Error::InvalidSpace(format!(
            "{dims} dimensions exceed the {} supported by the Sobol generator",
            sobol_burley::NUM_DIMENSIONS
        )));
    }
    let scramble = (seed ^ (seed >> 32)) as u32;
    let cap = (n.saturating_mul(64)).clamp(1024, 1 << 16);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    for idx in 0..cap as u32 {
        let values = space
            .vars()
            .iter()
            .enumerate()
            .map(|(d, spec)| {
                let u = f64::from(sobol_burley::sample(idx, d as u32, scramble));
                match *spec {
                    VariableSpec::Categorical { cardinality } => {
                        Value::Category(((u * cardinality as f64) as usize).min(cardinality - 1))
                    }
                    VariableSpec::Continuous { lower, upper } => Value::Real((lower + u * (upper - lower)).min(upper)),
                }
            })
            .collect();
        let p = Point::new(values);
        if seen.insert(point_key(&p)) {
            out.push(p);
            if out.len() == n {
                return Ok(out);
            }
        }
    }
    Err(Error::RetryCapExceeded {
        wanted: n,
        got: out.len(),
    })
}

/// Uniformly random point of the space.
pub fn random_point<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Point {
    Point::new(
        space
            .vars()
            .iter()
            .map(|spec| match *spec {
                VariableSpec::Categorical { cardinality } => Value::Category(rng.random_range(0..cardinality)),
                VariableSpec::Continuous { lower, upper } => Value::Real(rng.random_range(lower..=upper)),
            })
            .collect(),
    )
}
