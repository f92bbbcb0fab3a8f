use std::fs;

use ensvbll::benchmarks::{Objective, PoolProblem, PoolRecord, Sense};
use ensvbll::problem::{Point, SearchSpace};
use ensvbll::recursive::{write_id_map, FeatureFile};
use ensvbll::runner::config::{AcquisitionMode, ProblemConfig, RunConfig};
use ensvbll::runner::persist::{
    checkpoint_bytes, ensemble_from_checkpoint, trace_to_csv, weights_from_csv, CHECKPOINT_FILE, RESULT_FILE,
    TRACE_FILE, WEIGHTS_FILE,
};
use ensvbll::runner::replay::replay;
use ensvbll::runner::{run, run_with};
use ensvbll::{Error, Result};

fn quick(problem: ProblemConfig, n0: usize, budget: usize) -> RunConfig {
    let mut cfg = RunConfig::new(problem, budget);
    cfg.n0 = n0;
    cfg.training.phase1_epochs = 20;
    cfg.training.phase2_epochs = 20;
    cfg.backbone.hidden = vec![16];
    cfg.backbone.output_dim = 8;
    cfg.ensemble.ranks = vec![1, 2];
    cfg.acquisition.hill_climb_budget = 30;
    cfg
}

fn write_pool(dir: &std::path::Path, rows: &[(&str, &str, f64)]) -> std::path::PathBuf {
    let path = dir.join("pool.jsonl");
    let text: String = rows
        .iter()
        .map(|(id, repr, y)| format!("{{\"id\": \"{id}\", \"repr\": \"{repr}\", \"y\": {y}}}\n"))
        .collect();
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn budget_accounting_and_monotone_best() {
    let cfg = quick(
        ProblemConfig::Branin32 {
            dims: 32,
            cardinality: 11,
        },
        6,
        9,
    );
    let r = run(&cfg).unwrap();
    assert_eq!(r.trace.len(), 15);
    assert_eq!(r.summary.evaluations, 15);
    assert_eq!(r.trigger.len(), 9);
    assert_eq!(r.weights.len(), 10);
    assert!(r.trace[..6].iter().all(|row| row.member.is_none() && !row.fine_tuned));
    assert!(r.trace[6..].iter().all(|row| row.member.is_some()));
    for w in r.trace.windows(2) {
        assert!(w[1].best_so_far <= w[0].best_so_far);
    }
    let best = r.trace.iter().map(|row| row.y).fold(f64::INFINITY, f64::min);
    assert_eq!(r.best_value(), best);
    assert_eq!(r.summary.sense, Sense::Minimize);
}

#[test]
fn same_seed_same_trace_different_seed_differs() {
    let cfg = quick(
        ProblemConfig::AckleyCategorical {
            dims: 8,
            cardinality: 5,
        },
        4,
        6,
    );
    let a = run(&cfg).unwrap();
    let b = run(&cfg).unwrap();
    assert_eq!(trace_to_csv(&a.trace), trace_to_csv(&b.trace));
    assert_eq!(
        checkpoint_bytes(&a.ensemble).unwrap(),
        checkpoint_bytes(&b.ensemble).unwrap()
    );
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(trace_to_csv(&run(&other).unwrap().trace), trace_to_csv(&a.trace));
}

#[test]
fn mixed_and_continuous_spaces_use_sobol_design() {
    for problem in [
        ProblemConfig::AckleyMixed {
            n_cat: 6,
            cardinality: 5,
            n_cont: 2,
        },
        ProblemConfig::AckleyContinuous {
            dims: 3,
            lower: -2.0,
            upper: 2.0,
        },
    ] {
        let r = run(&quick(problem, 5, 4)).unwrap();
        assert_eq!(r.trace.len(), 9);
        assert!(r.best_value().is_finite());
    }
}

#[test]
fn sobol_pool_acquisition_and_batches() {
    let mut cfg = quick(
        ProblemConfig::AckleyCategorical {
            dims: 6,
            cardinality: 4,
        },
        3,
        7,
    );
    cfg.acquisition.mode = AcquisitionMode::SobolPool;
    cfg.acquisition.pool_size = 64;
    cfg.acquisition.q = 3;
    let r = run(&cfg).unwrap();
    assert_eq!(r.trace.len(), 10);
    let distinct: std::collections::HashSet<String> = r.trace.iter().map(|row| row.point.to_string()).collect();
    assert_eq!(distinct.len(), 10);
}

#[test]
fn persisted_outputs_round_trip_bytewise() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&quick(
        ProblemConfig::AckleyCategorical {
            dims: 5,
            cardinality: 4,
        },
        3,
        4,
    ))
    .unwrap();
    r.persist(dir.path()).unwrap();
    let ckpt = fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(
        checkpoint_bytes(&ensemble_from_checkpoint(&ckpt).unwrap()).unwrap(),
        ckpt
    );
    let trace = fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap();
    let rows = ensvbll::runner::persist::trace_from_csv(&trace).unwrap();
    assert_eq!(trace_to_csv(&rows), trace);
    for w in weights_from_csv(&fs::read_to_string(dir.path().join(WEIGHTS_FILE)).unwrap()).unwrap() {
        assert!((w.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    let summary =
        ensvbll::runner::persist::summary_from_json(&fs::read_to_string(dir.path().join(RESULT_FILE)).unwrap())
            .unwrap();
    assert_eq!(summary, r.summary);
    assert!(replay(&dir.path().join(TRACE_FILE), None).unwrap().ok());
}

#[test]
fn singleton_pool_evaluates_its_only_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_pool(dir.path(), &[("only", "0.5 1.5", 3.25)]);
    let cfg = quick(
        ProblemConfig::Pool {
            path,
            features: None,
            sense: Sense::Maximize,
        },
        10,
        1,
    );
    let r = run(&cfg).unwrap();
    assert_eq!(r.trace.len(), 1);
    assert_eq!(r.best_value(), 3.25);
    assert_eq!(r.best_point(), &Point::categories(&[0]));
    assert!(r.summary.stopped_early);
}

#[test]
fn pool_runs_exhaust_without_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<(String, String, f64)> = (0..8)
        .map(|i| {
            (
                format!("m{i}"),
                format!("{} {}", i as f64 / 8.0, (i * i) as f64 / 64.0),
                -((i as f64 - 5.0).powi(2)),
            )
        })
        .collect();
    let borrowed: Vec<(&str, &str, f64)> = rows.iter().map(|(a, b, y)| (a.as_str(), b.as_str(), *y)).collect();
    let path = write_pool(dir.path(), &borrowed);
    let cfg = quick(
        ProblemConfig::Pool {
            path,
            features: None,
            sense: Sense::Maximize,
        },
        3,
        20,
    );
    let r = run(&cfg).unwrap();
    assert_eq!(r.trace.len(), 8);
    assert!(r.summary.stopped_early);
    assert_eq!(r.best_value(), 0.0);
    let distinct: std::collections::HashSet<String> = r.trace.iter().map(|row| row.point.to_string()).collect();
    assert_eq!(distinct.len(), 8);
}

#[test]
fn pool_features_feed_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_pool(
        dir.path(),
        &[("a", "x", 1.0), ("b", "y", 2.0), ("c", "z", 0.5), ("d", "w", 1.5)],
    );
    let features = dir.path().join("pool.vbfc");
    let file = FeatureFile {
        dim: 3,
        records: vec![
            (0, vec![1.0, 0.0, 0.0]),
            (1, vec![0.0, 1.0, 0.0]),
            (2, vec![0.0, 0.0, 1.0]),
            (3, vec![0.5, 0.5, 0.0]),
        ],
    };
    file.write(&features).unwrap();
    let ids = [("a", 0u32), ("b", 1), ("c", 2), ("d", 3)]
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
    write_id_map(&ensvbll::benchmarks::id_map_path(&features), &ids).unwrap();
    let mut cfg = quick(
        ProblemConfig::Pool {
            path,
            features: Some(features),
            sense: Sense::Maximize,
        },
        2,
        2,
    );
    cfg.ensemble.bypass_backbone = true;
    cfg.ensemble.ranks = vec![1, 1];
    let mut r = run(&cfg).unwrap();
    assert_eq!(r.trace.len(), 4);
    for m in r.ensemble.members_mut() {
        for row in &file.records {
            m.features(&row.1).unwrap();
        }
        let before = m.cache.hits();
        for row in &file.records {
            assert_eq!(m.features(&row.1).unwrap(), row.1);
        }
        assert_eq!(m.cache.hits(), before + 4);
    }
}

struct Flaky {
    space: SearchSpace,
}

impl Objective for Flaky {
    fn name(&self) -> &str {
        "flaky"
    }
    fn space(&self) -> &SearchSpace {
        &self.space
    }
    fn sense(&self) -> Sense {
        Sense::Maximize
    }
    fn evaluate(&self, p: &Point) -> Result<f64> {
        match p.category(0) {
            Some(0) => Ok(f64::NAN),
            Some(1) => Err(Error::Objective {
                point: p.to_string(),
                msg: "simulator crashed".into(),
            }),
            _ => Ok(p.values.len() as f64 - p.hamming(&Point::categories(&[2, 2, 2, 2])) as f64),
        }
    }
}

#[test]
fn failures_abort_by_default_and_are_skipped_on_request() {
    let flaky = Flaky {
        space: SearchSpace::categorical(4, 3).unwrap(),
    };
    let mut cfg = quick(
        ProblemConfig::AckleyCategorical {
            dims: 4,
            cardinality: 3,
        },
        4,
        10,
    );
    assert!(run_with(&cfg, &flaky).is_err());
    cfg.skip_failures = true;
    let r = run_with(&cfg, &flaky).unwrap();
    assert_eq!(r.trace.len(), 14);
    assert!(!r.summary.failures.is_empty());
    assert!(r.trace.iter().all(|row| row.point.category(0) == Some(2)));
    assert!(r.best_value() <= 4.0);
}

#[test]
fn pool_problems_reject_trust_region_mode_and_oversized_ranks() {
    let pool = PoolProblem::new(
        vec![
            PoolRecord {
                id: "a".into(),
                repr: "1".into(),
                y: 1.0,
            },
            PoolRecord {
                id: "b".into(),
                repr: "2".into(),
                y: 2.0,
            },
        ],
        Sense::Maximize,
    )
    .unwrap();
    let mut cfg = quick(
        ProblemConfig::AckleyCategorical {
            dims: 1,
            cardinality: 2,
        },
        1,
        1,
    );
    cfg.ensemble.ranks = vec![1];
    cfg.acquisition.mode = AcquisitionMode::TrustRegion;
    assert!(matches!(run_with(&cfg, &pool), Err(Error::Config(_))));
    cfg.acquisition.mode = AcquisitionMode::Auto;
    assert_eq!(run_with(&cfg, &pool).unwrap().trace.len(), 2);
    cfg.ensemble.ranks = vec![2];
    assert!(matches!(run_with(&cfg, &pool), Err(Error::Config(_))));
}
