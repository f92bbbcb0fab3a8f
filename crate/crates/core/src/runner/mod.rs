//! The optimization loop: initial design, ensemble training, Thompson
//! proposals, evaluation and the recursive-or-retrain branch.

pub mod config;
pub mod persist;
pub mod replay;

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acquisition::{
    point_key, propose_from_pool, propose_trust_region, random_point, sobol_pool, thompson_draw, tr_adapt,
    ThompsonDraw, TrustRegion,
};
use crate::benchmarks::{
    load_pool, parse_dimacs, random_3cnf, AckleyProblem, Branin32, MaxSat, Objective, PoolProblem, Sense,
};
use crate::ensemble::{recursive_weight_update, Ensemble};
use crate::error::{Error, Result};
use crate::head::RegressionData;
use crate::problem::{encode_point, Dataset, Point, SearchSpace};
use crate::recursive::{should_finetune, TriggerState};

use config::{AcquisitionMode, ProblemConfig, RunConfig};
use persist::{
    FailureRecord, IterationRecord, RunSummary, TriggerRow, WeightsRow, CHECKPOINT_FILE, RESULT_FILE, TRACE_FILE,
    TRIGGER_FILE, WEIGHTS_FILE,
};

/// Builds the objective named by a problem config.
pub fn build_objective(cfg: &ProblemConfig) -> Result<Box<dyn Objective>> {
    Ok(match cfg {
        ProblemConfig::AckleyCategorical { dims, cardinality } => {
            Box::new(AckleyProblem::categorical(*dims, *cardinality)?)
        }
        ProblemConfig::AckleyContinuous { dims, lower, upper } => {
            Box::new(AckleyProblem::continuous(*dims, *lower, *upper)?)
        }
        ProblemConfig::AckleyMixed {
            n_cat,
            cardinality,
            n_cont,
        } => Box::new(AckleyProblem::mixed(*n_cat, *cardinality, *n_cont)?),
        ProblemConfig::Branin32 { dims, cardinality } => Box::new(Branin32::new(*dims, *cardinality)?),
        ProblemConfig::MaxsatFile { path } => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Box::new(MaxSat::new(parse_dimacs(&text)?)?)
        }
        ProblemConfig::MaxsatRandom {
            num_vars,
            num_clauses,
            instance_seed,
        } => Box::new(MaxSat::new(random_3cnf(*num_vars, *num_clauses, *instance_seed)?)?),
        ProblemConfig::Pool { path, features, sense } => Box::new(load_pool(path, features.as_deref(), *sense)?),
    })
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: RunSummary,
    pub trace: Vec<IterationRecord>,
    pub weights: Vec<WeightsRow>,
    pub trigger: Vec<TriggerRow>,
    pub ensemble: Ensemble,
}

impl RunResult {
    pub fn best_point(&self) -> &Point {
        &self.summary.best_point
    }

    pub fn best_value(&self) -> f64 {
        self.summary.best_value
    }

    /// Writes trace, weights, trigger log, summary and checkpoint into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        persist::write_text(&dir.join(TRACE_FILE), &persist::trace_to_csv(&self.trace))?;
        persist::write_text(
            &dir.join(WEIGHTS_FILE),
            &persist::weights_to_csv(self.ensemble.len(), &self.weights),
        )?;
        persist::write_text(&dir.join(TRIGGER_FILE), &persist::trigger_to_csv(&self.trigger))?;
        persist::write_text(&dir.join(RESULT_FILE), &persist::summary_to_json(&self.summary)?)?;
        persist::write_checkpoint(&dir.join(CHECKPOINT_FILE), &self.ensemble)
    }
}

/// Runs the configured problem.
pub fn run(cfg: &RunConfig) -> Result<RunResult> {
    let objective = build_objective(&cfg.problem)?;
    run_with(cfg, objective.as_ref())
}

enum Acquirer {
    Pool {
        inputs: Vec<Vec<f64>>,
        used: HashSet<usize>,
    },
    Candidates {
        points: Vec<Point>,
        inputs: Vec<Vec<f64>>,
        used: HashSet<usize>,
    },
    TrustRegion {
        tr: TrustRegion,
        local_best: f64,
    },
}

/// Maps points to backbone inputs: one-hot encoding, or a pool's feature table.
fn model_input(space: &SearchSpace, pool: Option<&(Vec<Vec<f64>>, &PoolProblem)>, p: &Point) -> Result<Vec<f64>> {
    match pool {
        Some((table, problem)) => Ok(table[problem.index_of(p)?].clone()),
        None => encode_point(space, p),
    }
}

struct Loop<'a> {
    cfg: &'a RunConfig,
    objective: &'a dyn Objective,
    sense: Sense,
    data: Dataset,
    trace: Vec<IterationRecord>,
    failures: Vec<FailureRecord>,
    best: Option<(Point, f64)>,
    visited: HashSet<Vec<u64>>,
}

impl Loop<'_> {
    /// Evaluates `p`; `Ok(None)` means the failure was recorded and skipped.
    fn evaluate(&mut self, p: &Point) -> Result<Option<f64>> {
        self.visited.insert(point_key(p));
        let outcome = self.objective.evaluate(p).and_then(|y| {
            if y.is_finite() {
                Ok(y)
            } else {
                Err(Error::Objective {
                    point: p.to_string(),
                    msg: format!("non-finite value {y}"),
                })
            }
        });
        match outcome {
            Ok(y) => Ok(Some(y)),
            Err(e) if self.cfg.skip_failures => {
                self.failures.push(FailureRecord {
                    point: p.to_string(),
                    message: e.to_string(),
                });
                if self.failures.len() > 10 * (self.cfg.n0 + self.cfg.budget) {
                    return Err(Error::Objective {
                        point: p.to_string(),
                        msg: format!("{} failed evaluations, giving up", self.failures.len()),
                    });
                }
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn record(&mut self, p: Point, y: f64, member: Option<usize>, started: Instant) -> Result<()> {
        let y_max = self.sense.to_max(y);
        self.data.push(p.clone(), y_max)?;
        if self.best.as_ref().is_none_or(|(_, b)| self.sense.better(y, *b)) {
            self.best = Some((p.clone(), y));
        }
        self.trace.push(IterationRecord {
            t: self.trace.len(),
            point: p,
            y,
            best_so_far: self.best.as_ref().map(|(_, b)| *b).unwrap_or(y),
            member,
            fine_tuned: false,
            wall_ms: if self.cfg.record_timing {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        Ok(())
    }
}

fn event_seed(run_seed: u64, event: u64) -> u64 {
    run_seed ^ event.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(29)
}

/// Runs the loop against a caller-supplied objective.
pub fn run_with(cfg: &RunConfig, objective: &dyn Objective) -> Result<RunResult> {
    cfg.validate()?;
    let space = objective.space().clone();
    let sense = objective.sense();
    let pool_problem = objective.as_pool();
    let pool = match pool_problem {
        Some(p) => Some((p.inputs()?, p)),
        None => None,
    };
    let input_dim = match &pool {
        Some((table, _)) => table[0].len(),
        None => space.encoded_len(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mode = match (pool_problem.is_some(), cfg.acquisition.mode) {
        (true, AcquisitionMode::TrustRegion) => {
            return Err(Error::Config("pool problems use pool acquisition".into()));
        }
        (true, _) => AcquisitionMode::Auto,
        (false, AcquisitionMode::Auto) => AcquisitionMode::TrustRegion,
        (false, m) => m,
    };
    let mut ens = Ensemble::init(&cfg.backbone.with_input(input_dim), &cfg.ensemble, cfg.cache, cfg.seed)
        .map_err(|e| match e {
            Error::InvalidShape(msg) => Error::Config(format!("{msg} (input width {input_dim})")),
            e => e,
        })?;

    let mut lp = Loop {
        cfg,
        objective,
        sense,
        data: Dataset::new(),
        trace: Vec::new(),
        failures: Vec::new(),
        best: None,
        visited: HashSet::new(),
    };

    // Initial design.
    let mut pool_used = HashSet::new();
    let n_pool = pool_problem.map_or(0, PoolProblem::len);
    let all_categorical = space.continuous_dims().next().is_none();
    let mut design: Vec<Point> = if let Some(p) = pool_problem {
        sample(&mut rng, n_pool, cfg.n0.min(n_pool))
            .into_iter()
            .map(|i| p.point(i))
            .collect()
    } else if all_categorical {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for _ in 0..1000 * cfg.n0 {
            let p = random_point(&space, &mut rng);
            if seen.insert(point_key(&p)) {
                out.push(p);
                if out.len() == cfg.n0 {
                    break;
                }
            }
        }
        out
    } else {
        sobol_pool(&space, cfg.n0, rng.random())?
    };
    design.reverse();
    let mut stopped_early = false;
    while lp.data.len() < cfg.n0 {
        let started = Instant::now();
        let p = match design.pop() {
            Some(p) => p,
            None => match pool_problem {
                Some(problem) => {
                    let free: Vec<usize> = (0..n_pool).filter(|i| !pool_used.contains(i)).collect();
                    if free.is_empty() {
                        break;
                    }
                    problem.point(free[rng.random_range(0..free.len())])
                }
                None => {
                    let mut p = random_point(&space, &mut rng);
                    for _ in 0..1000 {
                        if !lp.visited.contains(&point_key(&p)) {
                            break;
                        }
                        p = random_point(&space, &mut rng);
                    }
                    p
                }
            },
        };
        if let Some(problem) = pool_problem {
            pool_used.insert(problem.index_of(&p)?);
        }
        if let Some(y) = lp.evaluate(&p)? {
            lp.record(p, y, None, started)?;
        }
    }
    if lp.data.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let training_data = |ds: &Dataset| RegressionData::from_dataset(ds, |p| model_input(&space, pool.as_ref(), p));
    let mut finetunes = 0u64;
    lp.data.standardize()?;
    ens.finetune_all(
        &training_data(&lp.data)?,
        &cfg.training,
        event_seed(cfg.seed, finetunes),
    )?;
    finetunes += 1;
    let mut weights = vec![WeightsRow {
        t: lp.trace.len() - 1,
        weights: ens.weights(),
    }];

    let mut acq = match mode {
        AcquisitionMode::Auto => Acquirer::Pool {
            inputs: pool.as_ref().map(|(t, _)| t.clone()).unwrap_or_default(),
            used: pool_used,
        },
        AcquisitionMode::SobolPool => {
            let points = sobol_pool(&space, cfg.acquisition.pool_size, rng.random())?;
            let inputs = points.iter().map(|p| encode_point(&space, p)).collect::<Result<_>>()?;
            let used = points
                .iter()
                .enumerate()
                .filter(|(_, p)| lp.visited.contains(&point_key(p)))
                .map(|(i, _)| i)
                .collect();
            Acquirer::Candidates { points, inputs, used }
        }
        AcquisitionMode::TrustRegion => {
            let (center, local_best) = lp
                .data
                .observations()
                .iter()
                .fold(None::<(&Point, f64)>, |acc, o| match acc {
                    Some((_, b)) if b >= o.y => acc,
                    _ => Some((&o.point, o.y)),
                })
                .map(|(p, y)| (p.clone(), y))
                .ok_or(Error::EmptyDataset)?;
            Acquirer::TrustRegion {
                tr: TrustRegion::new(&space, center, &cfg.trust_region)?,
                local_best,
            }
        }
    };

    let mut trigger_rows = Vec::new();
    let mut trigger_state = TriggerState::default();
    let mut spent = 0;
    'outer: while spent < cfg.budget {
        let started = Instant::now();
        let mut batch: Vec<(ThompsonDraw, Point)> = Vec::new();
        for _ in 0..cfg.acquisition.q.min(cfg.budget - spent) {
            let draw = thompson_draw(&ens, &mut rng)?;
            let proposal = match &mut acq {
                Acquirer::Pool { inputs, used } => match propose_from_pool(&draw, &mut ens, inputs, used) {
                    Ok(i) => {
                        used.insert(i);
                        pool_problem.map(|p| p.point(i))
                    }
                    Err(Error::PoolExhausted) => None,
                    Err(e) => return Err(e),
                },
                Acquirer::Candidates { points, inputs, used } => match propose_from_pool(&draw, &mut ens, inputs, used)
                {
                    Ok(i) => {
                        used.insert(i);
                        Some(points[i].clone())
                    }
                    Err(Error::PoolExhausted) => None,
                    Err(e) => return Err(e),
                },
                Acquirer::TrustRegion { tr, .. } => {
                    let p = propose_trust_region(
                        &draw,
                        &mut ens,
                        &space,
                        tr,
                        cfg.acquisition.hill_climb_budget,
                        &lp.visited,
                        cfg.trust_region.max_rounds,
                        &mut rng,
                    )?;
                    lp.visited.insert(point_key(&p));
                    Some(p)
                }
            };
            match proposal {
                Some(p) => batch.push((draw, p)),
                None => break,
            }
        }
        if batch.is_empty() {
            stopped_early = true;
            break;
        }

        for (draw, p) in batch {
            let Some(y) = lp.evaluate(&p)? else {
                continue;
            };
            spent += 1;
            let y_max = sense.to_max(y);
            if let Acquirer::TrustRegion { tr, local_best } = &mut acq {
                let improved = y_max > *local_best;
                if improved {
                    *local_best = y_max;
                    tr.center = p.clone();
                }
                if tr_adapt(tr, improved) {
                    tr.restart(random_point(&space, &mut rng));
                    *local_best = f64::NEG_INFINITY;
                }
            }
            lp.record(p.clone(), y, Some(draw.member), started)?;
            let x = model_input(&space, pool.as_ref(), &p)?;
            let y_std = lp.data.to_standard(y_max);
            let log_preds = ens.member_log_predictives(&x, y_std)?;
            let (_, marginal) = recursive_weight_update(ens.log_weights(), &log_preds)?;
            let decision = should_finetune(&cfg.trigger, &trigger_state, marginal);
            if decision.finetune {
                lp.data.standardize()?;
                ens.finetune_all(
                    &training_data(&lp.data)?,
                    &cfg.training,
                    event_seed(cfg.seed, finetunes),
                )?;
                finetunes += 1;
                trigger_state = TriggerState::default();
            } else {
                ens.recursive_member_updates(&x, y_std)?;
                trigger_state = decision.state;
            }
            let t = lp.trace.len() - 1;
            lp.trace[t].fine_tuned = decision.finetune;
            trigger_rows.push(TriggerRow {
                t,
                log_marginal: marginal,
                tracked: decision.tracked,
                fine_tuned: decision.finetune,
            });
            weights.push(WeightsRow {
                t,
                weights: ens.weights(),
            });
            if spent == cfg.budget {
                break 'outer;
            }
        }
    }

    let (best_point, best_value) = lp.best.clone().ok_or(Error::EmptyDataset)?;
    let summary = RunSummary {
        best_point,
        best_value,
        sense,
        seed: cfg.seed,
        evaluations: lp.trace.len(),
        finetunes: finetunes as usize,
        stopped_early,
        failures: lp.failures,
        config: cfg.clone(),
    };
    Ok(RunResult {
        summary,
        trace: lp.trace,
        weights,
        trigger: trigger_rows,
        ensemble: ens,
    })
}
