//! Test objectives and problem loaders.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::{E, PI};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{validate_point, Point, SearchSpace, VariableSpec};
use crate::recursive::{read_id_map, FeatureFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Minimize,
    Maximize,
}

impl Sense {
    /// Maps a raw objective value into the maximization convention.
    pub fn to_max(self, y: f64) -> f64 {
        match self {
            Sense::Maximize => y,
            Sense::Minimize => -y,
        }
    }

    pub fn better(self, a: f64, b: f64) -> bool {
        self.to_max(a) > self.to_max(b)
    }
}

/// A black-box objective over a search space, in its own sense.
pub trait Objective {
    fn name(&self) -> &str;
    fn space(&self) -> &SearchSpace;
    fn sense(&self) -> Sense;
    fn evaluate(&self, p: &Point) -> Result<f64>;

    fn as_pool(&self) -> Option<&PoolProblem> {
        None
    }
}

pub fn branin_variant(x1: f64, x2: f64) -> f64 {
    let q = x2 - 0.129 * x1 * x1 + 1.6 * x1 - 6.0;
    q * q + 10.0 * (1.0 - 0.125 / PI) * x1.cos() + 10.0
}

pub fn ackley(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let sq = x.iter().map(|v| v * v).sum::<f64>() / d;
    let cos = x.iter().map(|v| (2.0 * PI * v).cos()).sum::<f64>() / d;
    -20.0 * (-0.2 * sq.sqrt()).exp() - cos.exp() + 20.0 + E
}

/// Level `l` of `c` on the equal-spaced grid over `[lo, hi]`.
pub fn grid_value(level: usize, cardinality: usize, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * level as f64 / (cardinality - 1) as f64
}

fn categories_of(space: &SearchSpace, p: &Point) -> Result<Vec<usize>> {
    validate_point(space, p)?;
    (0..p.len())
        .map(|i| {
            p.category(i)
                .ok_or(Error::InvalidSpace(format!("dim {i} is not categorical")))
        })
        .collect()
}

/// Branin on two active categorical dims among `dims`; the rest are distractors.
#[derive(Debug, Clone)]
pub struct Branin32 {
    space: SearchSpace,
    cardinality: usize,
}

impl Branin32 {
    pub fn new(dims: usize, cardinality: usize) -> Result<Self> {
        if dims < 2 {
            return Err(Error::InvalidSpace("branin needs at least two dimensions".into()));
        }
        Ok(Self {
            space: SearchSpace::categorical(dims, cardinality)?,
            cardinality,
        })
    }
}

impl Objective for Branin32 {
    fn name(&self) -> &str {
        "branin32"
    }

    fn space(&self) -> &SearchSpace {
        &self.space
    }

    fn sense(&self) -> Sense {
        Sense::Minimize
    }

    fn evaluate(&self, p: &Point) -> Result<f64> {
        let c = categories_of(&self.space, p)?;
        let x1 = grid_value(c[0], self.cardinality, -5.0, 10.0);
        let x2 = grid_value(c[1], self.cardinality, 0.0, 15.0);
        Ok(branin_variant(x1, x2))
    }
}

/// Ackley over categorical grids on `[-1, 1]` and continuous coordinates.
#[derive(Debug, Clone)]
pub struct AckleyProblem {
    name: &'static str,
    space: SearchSpace,
}

impl AckleyProblem {
    pub fn categorical(dims: usize, cardinality: usize) -> Result<Self> {
        Ok(Self {
            name: "ackley_categorical",
            space: SearchSpace::categorical(dims, cardinality)?,
        })
    }

    pub fn continuous(dims: usize, lower: f64, upper: f64) -> Result<Self> {
        Ok(Self {
            name: "ackley_continuous",
            space: SearchSpace::new(vec![VariableSpec::continuous(lower, upper); dims])?,
        })
    }

    /// Categorical dims first, then continuous dims on `[-1, 1]`.
    pub fn mixed(n_cat: usize, cardinality: usize, n_cont: usize) -> Result<Self> {
        let mut vars = vec![VariableSpec::categorical(cardinality); n_cat];
        vars.extend(std::iter::repeat_n(VariableSpec::continuous(-1.0, 1.0), n_cont));
        Ok(Self {
            name: "ackley_mixed",
            space: SearchSpace::new(vars)?,
        })
    }

    pub fn coordinates(&self, p: &Point) -> Result<Vec<f64>> {
        validate_point(&self.space, p)?;
        Ok(self
            .space
            .vars()
            .iter()
            .enumerate()
            .map(|(i, spec)| match *spec {
                VariableSpec::Categorical { cardinality } => grid_value(p.category(i).unwrap(), cardinality, -1.0, 1.0),
                VariableSpec::Continuous { .. } => p.real(i).unwrap(),
            })
            .collect())
    }
}

impl Objective for AckleyProblem {
    fn name(&self) -> &str {
        self.name
    }

    fn space(&self) -> &SearchSpace {
        &self.space
    }

    fn sense(&self) -> Sense {
        Sense::Minimize
    }

    fn evaluate(&self, p: &Point) -> Result<f64> {
        Ok(ackley(&self.coordinates(p)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnfInstance {
    pub num_vars: usize,
    pub clauses: Vec<Vec<i64>>,
}

impl CnfInstance {
    pub fn new(num_vars: usize, clauses: Vec<Vec<i64>>) -> Result<Self> {
        if num_vars == 0 {
            return Err(Error::Dimacs {
                line: 0,
                msg: "instance needs at least one variable".into(),
            });
        }
        for c in &clauses {
            if c.is_empty() {
                return Err(Error::Dimacs {
                    line: 0,
                    msg: "empty clause".into(),
                });
            }
            if let Some(l) = c.iter().find(|l| **l == 0 || l.unsigned_abs() as usize > num_vars) {
                return Err(Error::Dimacs {
                    line: 0,
                    msg: format!("literal {l} out of range 1..={num_vars}"),
                });
            }
        }
        Ok(Self { num_vars, clauses })
    }

    pub fn satisfied(&self, assignment: &[bool]) -> usize {
        self.clauses
            .iter()
            .filter(|c| {
                c.iter().any(|&l| {
                    let v = assignment[l.unsigned_abs() as usize - 1];
                    if l > 0 {
                        v
                    } else {
                        !v
                    }
                })
            })
            .count()
    }
}

pub fn parse_dimacs(text: &str) -> Result<CnfInstance> {
    let err = |line: usize, msg: String| Error::Dimacs { line, msg };
    let mut header: Option<(usize, usize)> = None;
    let mut clauses = Vec::new();
    let mut current: Vec<i64> = Vec::new();
    let mut last_line = 0;
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('c') || line.starts_with('%') {
            continue;
        }
        last_line = line_no;
        if line.starts_with('p') {
            if header.is_some() {
                return Err(err(line_no, "duplicate header".into()));
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let parsed = match parts.as_slice() {
                ["p", "cnf", v, c] => v.parse::<usize>().ok().zip(c.parse::<usize>().ok()),
                _ => None,
            };
            header = Some(parsed.ok_or_else(|| err(line_no, format!("malformed header {line:?}")))?);
            continue;
        }
        let (vars, _) = header.ok_or_else(|| err(line_no, "clause before header".into()))?;
        for tok in line.split_whitespace() {
            let lit: i64 = tok.parse().map_err(|_| err(line_no, format!("bad literal {tok:?}")))?;
            if lit == 0 {
                if current.is_empty() {
                    return Err(err(line_no, "empty clause".into()));
                }
                clauses.push(std::mem::take(&mut current));
            } else if lit.unsigned_abs() as usize > vars {
                return Err(err(line_no, format!("literal {lit} out of range 1..={vars}")));
            } else {
                current.push(lit);
            }
        }
    }
    let (vars, count) = header.ok_or_else(|| err(0, "missing header".into()))?;
    if !current.is_empty() {
        return Err(err(last_line, "clause missing terminating 0".into()));
    }
    if clauses.len() != count {
        return Err(err(
            last_line,
            format!("header declares {count} clauses, found {}", clauses.len()),
        ));
    }
    CnfInstance::new(vars, clauses)
}

pub fn to_dimacs(inst: &CnfInstance) -> String {
    let mut out = format!("p cnf {} {}\n", inst.num_vars, inst.clauses.len());
    for c in &inst.clauses {
        for l in c {
            let _ = write!(out, "{l} ");
        }
        out.push_str("0\n");
    }
    out
}

/// Uniform random 3-CNF: three distinct variables per clause, random signs.
pub fn random_3cnf(num_vars: usize, num_clauses: usize, seed: u64) -> Result<CnfInstance> {
    if num_vars < 3 {
        return Err(Error::Config("random 3-CNF needs at least 3 variables".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clauses = (0..num_clauses)
        .map(|_| {
            sample_indices(&mut rng, num_vars, 3)
                .into_iter()
                .map(|v| {
                    let lit = v as i64 + 1;
                    if rng.random::<bool>() {
                        lit
                    } else {
                        -lit
                    }
                })
                .collect()
        })
        .collect();
    CnfInstance::new(num_vars, clauses)
}

/// Number of satisfied clauses; category 1 means true.
pub fn maxsat_objective(inst: &CnfInstance, assignment: &Point) -> Result<f64> {
    if assignment.len() != inst.num_vars {
        return Err(Error::DimensionMismatch {
            expected: inst.num_vars,
            got: assignment.len(),
        });
    }
    let bits = (0..inst.num_vars)
        .map(|i| match assignment.category(i) {
            Some(0) => Ok(false),
            Some(1) => Ok(true),
            _ => Err(Error::InvalidSpace(format!("dim {i} is not a binary category"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(inst.satisfied(&bits) as f64)
}

#[derive(Debug, Clone)]
pub struct MaxSat {
    inst: CnfInstance,
    space: SearchSpace,
}

impl MaxSat {
    pub fn new(inst: CnfInstance) -> Result<Self> {
        let space = SearchSpace::categorical(inst.num_vars, 2)?;
        Ok(Self { inst, space })
    }

    pub fn instance(&self) -> &CnfInstance {
        &self.inst
    }
}

impl Objective for MaxSat {
    fn name(&self) -> &str {
        "maxsat"
    }

    fn space(&self) -> &SearchSpace {
        &self.space
    }

    fn sense(&self) -> Sense {
        Sense::Maximize
    }

    fn evaluate(&self, p: &Point) -> Result<f64> {
        maxsat_objective(&self.inst, p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolRecord {
    pub id: String,
    pub repr: String,
    pub y: f64,
}

/// A finite candidate set with tabulated objective values.
///
/// The space is one categorical variable indexing the records.
#[derive(Debug, Clone)]
pub struct PoolProblem {
    records: Vec<PoolRecord>,
    index: BTreeMap<String, usize>,
    features: Option<Vec<Vec<f64>>>,
    sense: Sense,
    space: SearchSpace,
}

impl PoolProblem {
    pub fn new(records: Vec<PoolRecord>, sense: Sense) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Pool {
                line: 0,
                msg: "pool is empty".into(),
            });
        }
        let mut index = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::Pool {
                    line: i + 1,
                    msg: format!("duplicate id {:?}", r.id),
                });
            }
        }
        let space = SearchSpace::categorical(1, records.len().max(2))?;
        Ok(Self {
            records,
            index,
            features: None,
            sense,
            space,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PoolRecord] {
        &self.records
    }

    pub fn point(&self, i: usize) -> Point {
        Point::categories(&[i])
    }

    pub fn index_of(&self, p: &Point) -> Result<usize> {
        match p.category(0) {
            Some(i) if p.len() == 1 && i < self.records.len() => Ok(i),
            _ => Err(Error::Objective {
                point: p.to_string(),
                msg: "not a pool index".into(),
            }),
        }
    }

    pub fn lookup(&self, id: &str) -> Option<f64> {
        self.index.get(id).map(|&i| self.records[i].y)
    }

    pub fn features(&self) -> Option<&[Vec<f64>]> {
        self.features.as_deref()
    }

    /// Attaches externally computed features, matched by id through the sidecar map.
    pub fn attach_features(&mut self, file: &FeatureFile, ids: &BTreeMap<String, u32>) -> Result<()> {
        let by_id: BTreeMap<u32, &[f64]> = file.records.iter().map(|(i, v)| (*i, v.as_slice())).collect();
        let rows = self
            .records
            .iter()
            .map(|r| {
                let num = ids
                    .get(&r.id)
                    .ok_or_else(|| Error::FeatureFile(format!("id {:?} missing from sidecar", r.id)))?;
                let v = by_id
                    .get(num)
                    .ok_or_else(|| Error::FeatureFile(format!("record {num} for {:?} missing", r.id)))?;
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::FeatureFile(format!("non-finite feature for {:?}", r.id)));
                }
                Ok(v.to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        self.features = Some(rows);
        Ok(())
    }

    /// Model inputs: attached features, else the repr parsed as numbers.
    pub fn inputs(&self) -> Result<Vec<Vec<f64>>> {
        if let Some(f) = &self.features {
            return Ok(f.clone());
        }
        let rows = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.repr
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|t| !t.is_empty())
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<Vec<f64>, _>>()
                    .map_err(|_| Error::Pool {
                        line: i + 1,
                        msg: format!("repr of {:?} is not numeric and no features are attached", r.id),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let width = rows[0].len();
        if width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::Pool {
                line: 0,
                msg: "numeric reprs must share one nonzero width".into(),
            });
        }
        Ok(rows)
    }
}

impl Objective for PoolProblem {
    fn name(&self) -> &str {
        "pool"
    }

    fn space(&self) -> &SearchSpace {
        &self.space
    }

    fn sense(&self) -> Sense {
        self.sense
    }

    fn evaluate(&self, p: &Point) -> Result<f64> {
        let i = self.index_of(p)?;
        let y = self.records[i].y;
        if !y.is_finite() {
            return Err(Error::Objective {
                point: p.to_string(),
                msg: format!("non-finite value for {:?}", self.records[i].id),
            });
        }
        Ok(y)
    }

    fn as_pool(&self) -> Option<&PoolProblem> {
        Some(self)
    }
}

/// Sidecar location for a feature file: `<file>.ids.json`.
pub fn id_map_path(features: &Path) -> PathBuf {
    let mut s = features.as_os_str().to_owned();
    s.push(".ids.json");
    PathBuf::from(s)
}

/// Reads JSON-lines pool records, attaching a feature file when given.
pub fn load_pool(path: &Path, features: Option<&Path>, sense: Sense) -> Result<PoolProblem> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoolRecord = serde_json::from_str(line).map_err(|e| Error::Pool {
            line: n + 1,
            msg: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Pool {
                line: n + 1,
                msg: format!("duplicate id {:?}", rec.id),
            });
        }
        records.push(rec);
    }
    let mut pool = PoolProblem::new(records, sense)?;
    if let Some(f) = features {
        let file = FeatureFile::read(f)?;
        let ids = read_id_map(&id_map_path(f))?;
        pool.attach_features(&file, &ids)?;
    }
    Ok(pool)
}
