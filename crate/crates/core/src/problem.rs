//! Search spaces, points, observations and the numeric encoding fed to backbones.
//!
//! Categorical variables are one-hot encoded; continuous variables are rescaled
//! affinely onto `[0, 1]`. Targets are standardized before training and every
//! model quantity lives in standardized units; [`Dataset`] keeps the statistics
//! needed to map back.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariableSpec {
    Categorical { cardinality: usize },
    Continuous { lower: f64, upper: f64 },
}

impl VariableSpec {
    pub fn categorical(cardinality: usize) -> Self {
        VariableSpec::Categorical { cardinality }
    }

    pub fn continuous(lower: f64, upper: f64) -> Self {
        VariableSpec::Continuous { lower, upper }
    }

    /// Width of this variable in the encoded vector.
    pub fn encoded_len(&self) -> usize {
        match *self {
            VariableSpec::Categorical { cardinality } => cardinality,
            VariableSpec::Continuous { .. } => 1,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        match *self {
            VariableSpec::Categorical { cardinality } if cardinality < 2 => {
                Err(format!("categorical cardinality {cardinality} < 2"))
            }
            VariableSpec::Continuous { lower, upper } if !(lower.is_finite() && upper.is_finite() && lower < upper) => {
                Err(format!("continuous bounds [{lower}, {upper}] are not ordered"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    vars: Vec<VariableSpec>,
}

impl SearchSpace {
    pub fn new(vars: Vec<VariableSpec>) -> Result<Self> {
        if vars.is_empty() {
            return Err(Error::InvalidSpace("space has no variables".into()));
        }
        for (i, v) in vars.iter().enumerate() {
            v.check()
                .map_err(|msg| Error::InvalidSpace(format!("dim {i}: {msg}")))?;
        }
        Ok(Self { vars })
    }

    /// `n` categorical variables with the same cardinality.
    pub fn categorical(n: usize, cardinality: usize) -> Result<Self> {
        Self::new(vec![VariableSpec::categorical(cardinality); n])
    }

    pub fn vars(&self) -> &[VariableSpec] {
        &self.vars
    }

    pub fn dim(&self) -> usize {
        self.vars.len()
    }

    pub fn encoded_len(&self) -> usize {
        self.vars.iter().map(VariableSpec::encoded_len).sum()
    }

    pub fn categorical_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| match *v {
            VariableSpec::Categorical { cardinality } => Some((i, cardinality)),
            VariableSpec::Continuous { .. } => None,
        })
    }

    pub fn continuous_dims(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| match *v {
            VariableSpec::Continuous { lower, upper } => Some((i, lower, upper)),
            VariableSpec::Categorical { .. } => None,
        })
    }
}

/// One coordinate of a [`Point`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Category(usize),
    Real(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point {
    pub values: Vec<Value>,
}

impl Point {
    pub fn new(values: Vec<Value>) -> Self {
        Self { values }
    }

    pub fn categories(levels: &[usize]) -> Self {
        Self::new(levels.iter().map(|&c| Value::Category(c)).collect())
    }

    pub fn reals(xs: &[f64]) -> Self {
        Self::new(xs.iter().map(|&x| Value::Real(x)).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Category index at `dim`, if that coordinate is categorical.
    pub fn category(&self, dim: usize) -> Option<usize> {
        match self.values.get(dim) {
            Some(Value::Category(c)) => Some(*c),
            _ => None,
        }
    }

    pub fn real(&self, dim: usize) -> Option<f64> {
        match self.values.get(dim) {
            Some(Value::Real(x)) => Some(*x),
            _ => None,
        }
    }

    /// Number of categorical coordinates in which `self` and `other` differ.
    pub fn hamming(&self, other: &Point) -> usize {
        self.values
            .iter()
            .zip(&other.values)
            .filter(|(a, b)| matches!((a, b), (Value::Category(x), Value::Category(y)) if x != y))
            .count()
    }
}

/// Compact text form: categories as integers, reals in 17-significant-digit
/// scientific notation, separated by `;`.
impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.values.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            match v {
                Value::Category(c) => write!(f, "{c}")?,
                Value::Real(x) => write!(f, "{x:.16e}")?,
            }
        }
        Ok(())
    }
}

impl FromStr for Point {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Ok(Point::new(Vec::new()));
        }
        s.split(';')
            .map(|tok| {
                let bad = || Error::Trace(format!("bad point token {tok:?}"));
                if tok.contains(['e', 'E', '.']) || tok.contains("inf") || tok.contains("NaN") {
                    tok.parse::<f64>().map(Value::Real).map_err(|_| bad())
                } else {
                    tok.parse::<usize>().map(Value::Category).map_err(|_| bad())
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(Point::new)
    }
}

/// Why a point is not a member of a space.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("dim {dim}: {reason}")]
pub struct PointViolation {
    pub dim: usize,
    pub reason: String,
}

/// Checks every point invariant; the violation names the first offending dimension.
pub fn validate_point(space: &SearchSpace, p: &Point) -> std::result::Result<(), PointViolation> {
    if p.len() != space.dim() {
        return Err(PointViolation {
            dim: p.len().min(space.dim()),
            reason: format!("point has {} coordinates, space has {}", p.len(), space.dim()),
        });
    }
    for (dim, (spec, v)) in space.vars.iter().zip(&p.values).enumerate() {
        let reason = match (*spec, *v) {
            (VariableSpec::Categorical { cardinality }, Value::Category(c)) => {
                (c >= cardinality).then(|| format!("category {c} >= cardinality {cardinality}"))
            }
            (VariableSpec::Continuous { lower, upper }, Value::Real(x)) => {
                (!(lower..=upper).contains(&x)).then(|| format!("value {x} outside [{lower}, {upper}]"))
            }
            (VariableSpec::Categorical { .. }, Value::Real(_)) => Some("real value for a categorical variable".into()),
            (VariableSpec::Continuous { .. }, Value::Category(_)) => Some("category for a continuous variable".into()),
        };
        if let Some(reason) = reason {
            return Err(PointViolation { dim, reason });
        }
    }
    Ok(())
}

pub fn encode_point(space: &SearchSpace, p: &Point) -> Result<Vec<f64>> {
    validate_point(space, p)?;
    let mut out = Vec::with_capacity(space.encoded_len());
    for (spec, v) in space.vars.iter().zip(&p.values) {
        match (*spec, *v) {
            (VariableSpec::Categorical { cardinality }, Value::Category(c)) => {
                out.extend((0..cardinality).map(|k| if k == c { 1.0 } else { 0.0 }));
            }
            (VariableSpec::Continuous { lower, upper }, Value::Real(x)) => {
                out.push((x - lower) / (upper - lower));
            }
            _ => unreachable!("validated above"),
        }
    }
    Ok(out)
}

/// Recovers the continuous coordinates (in original units, space order) from an encoding.
pub fn decode_continuous(space: &SearchSpace, encoded: &[f64]) -> Result<Vec<f64>> {
    if encoded.len() != space.encoded_len() {
        return Err(Error::DimensionMismatch {
            expected: space.encoded_len(),
            got: encoded.len(),
        });
    }
    let mut offset = 0;
    let mut out = Vec::new();
    for spec in &space.vars {
        if let VariableSpec::Continuous { lower, upper } = *spec {
            out.push(lower + encoded[offset] * (upper - lower));
        }
        offset += spec.encoded_len();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub point: Point,
    pub y: f64,
    pub y_std: f64,
}

/// Evaluated pairs plus the standardization statistics currently in force.
///
/// `push` standardizes new targets with the statistics of the last
/// [`Dataset::standardize`] call, so a posterior propagated between two
/// re-standardizations stays in one consistent unit system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    observations: Vec<Observation>,
    y_mean: f64,
    y_scale: f64,
}

impl Default for Dataset {
    fn default() -> Self {
        Self::new()
    }
}

impl Dataset {
    pub fn new() -> Self {
        Self {
            observations: Vec::new(),
            y_mean: 0.0,
            y_scale: 1.0,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Point, f64)>) -> Result<Self> {
        let mut ds = Self::new();
        for (p, y) in pairs {
            ds.push(p, y)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, point: Point, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::NonFinite("objective value"));
        }
        let y_std = self.to_standard(y);
        self.observations.push(Observation { point, y, y_std });
        Ok(())
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    pub fn y_scale(&self) -> f64 {
        self.y_scale
    }

    pub fn to_standard(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_scale
    }

    pub fn from_standard(&self, y_std: f64) -> f64 {
        y_std * self.y_scale + self.y_mean
    }

    pub fn ys_std(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.y_std).collect()
    }

    /// Recomputes mean and sample standard deviation over every stored
    /// target and refreshes all `y_std` fields. A scale of 1 is used when
    /// fewer than two observations exist or the targets are constant.
    pub fn standardize(&mut self) -> Result<()> {
        let n = self.observations.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mean = self.observations.iter().map(|o| o.y).sum::<f64>() / n as f64;
        let scale = if n < 2 {
            1.0
        } else {
            let ss: f64 = self.observations.iter().map(|o| (o.y - mean).powi(2)).sum();
            let sd = (ss / (n - 1) as f64).sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        };
        self.y_mean = mean;
        self.y_scale = scale;
        for o in &mut self.observations {
            o.y_std = (o.y - mean) / scale;
        }
        Ok(())
    }
}

/// Functional form of [`Dataset::standardize`].
pub fn standardize(ds: &Dataset) -> Result<Dataset> {
    let mut out = ds.clone();
    out.standardize()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat3() -> SearchSpace {
        SearchSpace::new(vec![VariableSpec::categorical(3)]).unwrap()
    }

    #[test]
    fn validate_boundary_and_out_of_range() {
        let space = cat3();
        assert!(validate_point(&space, &Point::categories(&[2])).is_ok());
        let err = validate_point(&space, &Point::categories(&[3])).unwrap_err();
        assert_eq!(err.dim, 0);

        let cont = SearchSpace::new(vec![VariableSpec::continuous(0.0, 1.0)]).unwrap();
        assert!(validate_point(&cont, &Point::reals(&[0.5])).is_ok());
        assert!(validate_point(&cont, &Point::reals(&[1.5])).is_err());
    }

    #[test]
    fn validate_reports_first_bad_dim() {
        let space = SearchSpace::new(vec![
            VariableSpec::categorical(2),
            VariableSpec::continuous(0.0, 1.0),
            VariableSpec::categorical(2),
        ])
        .unwrap();
        let p = Point::new(vec![Value::Category(1), Value::Real(2.0), Value::Category(5)]);
        assert_eq!(validate_point(&space, &p).unwrap_err().dim, 1);
        let short = Point::categories(&[0]);
        assert!(validate_point(&space, &short).is_err());
    }

    #[test]
    fn space_rejects_bad_specs() {
        assert!(SearchSpace::new(vec![VariableSpec::categorical(1)]).is_err());
        assert!(SearchSpace::new(vec![VariableSpec::continuous(1.0, 1.0)]).is_err());
        assert!(SearchSpace::new(vec![]).is_err());
    }

    #[test]
    fn encode_examples() {
        assert_eq!(
            encode_point(&cat3(), &Point::categories(&[1])).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        let cont = SearchSpace::new(vec![VariableSpec::continuous(-1.0, 1.0)]).unwrap();
        assert_eq!(encode_point(&cont, &Point::reals(&[0.0])).unwrap(), vec![0.5]);

        let mixed = SearchSpace::new(vec![VariableSpec::categorical(2), VariableSpec::continuous(0.0, 2.0)]).unwrap();
        let p = Point::new(vec![Value::Category(0), Value::Real(2.0)]);
        assert_eq!(encode_point(&mixed, &p).unwrap(), vec![1.0, 0.0, 1.0]);
        assert!(encode_point(&mixed, &Point::categories(&[0, 0])).is_err());
    }

    #[test]
    fn standardize_examples() {
        let ds = Dataset::from_pairs([(Point::categories(&[0]), 2.0), (Point::categories(&[1]), 4.0)]).unwrap();
        let ds = standardize(&ds).unwrap();
        assert_eq!(ds.y_mean(), 3.0);
        assert!((ds.y_scale() - 2f64.sqrt()).abs() < 1e-15);
        let h = 1.0 / 2f64.sqrt();
        assert!((ds.observations()[0].y_std + h).abs() < 1e-15);
        assert!((ds.observations()[1].y_std - h).abs() < 1e-15);

        let one = standardize(&Dataset::from_pairs([(Point::categories(&[0]), 5.0)]).unwrap()).unwrap();
        assert_eq!(
            (one.y_mean(), one.y_scale(), one.observations()[0].y_std),
            (5.0, 1.0, 0.0)
        );

        let flat = standardize(&Dataset::from_pairs((0..3).map(|i| (Point::categories(&[i]), 1.0))).unwrap()).unwrap();
        assert_eq!(flat.y_scale(), 1.0);
        assert_eq!(flat.ys_std(), vec![0.0; 3]);

        assert!(matches!(standardize(&Dataset::new()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn push_after_standardize_uses_frozen_stats() {
        let mut ds = Dataset::from_pairs([(Point::categories(&[0]), 2.0), (Point::categories(&[1]), 4.0)]).unwrap();
        ds.standardize().unwrap();
        ds.push(Point::categories(&[2]), 3.0).unwrap();
        assert_eq!(ds.observations()[2].y_std, 0.0);
        assert!(ds.push(Point::categories(&[2]), f64::NAN).is_err());
    }

    #[test]
    fn point_text_round_trip() {
        let p = Point::new(vec![Value::Category(3), Value::Real(0.1), Value::Real(-2.5e-7)]);
        let s = p.to_string();
        assert_eq!(s.parse::<Point>().unwrap(), p);
        let q = Point::new(vec![Value::Real(1.0)]);
        assert_eq!(q.to_string().parse::<Point>().unwrap(), q);
    }

    #[test]
    fn hamming_counts_categorical_differences() {
        let a = Point::categories(&[0, 1, 2, 0]);
        let b = Point::categories(&[0, 2, 2, 1]);
        assert_eq!(a.hamming(&b), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mixed_space() -> SearchSpace {
            SearchSpace::new(vec![
                VariableSpec::categorical(4),
                VariableSpec::continuous(-3.0, 7.5),
                VariableSpec::categorical(2),
                VariableSpec::continuous(1e-3, 2e-3),
            ])
            .unwrap()
        }

        proptest! {
            #[test]
            fn encoding_is_pure_and_decodable(
                c0 in 0usize..4, c2 in 0usize..2, u1 in 0.0f64..=1.0, u3 in 0.0f64..=1.0,
            ) {
                let space = mixed_space();
                let x1 = -3.0 + 10.5 * u1;
                let x3 = 1e-3 + 1e-3 * u3;
                let p = Point::new(vec![
                    Value::Category(c0), Value::Real(x1), Value::Category(c2), Value::Real(x3),
                ]);
                let e1 = encode_point(&space, &p).unwrap();
                let e2 = encode_point(&space, &p).unwrap();
                prop_assert_eq!(&e1, &e2);
                prop_assert_eq!(e1.len(), space.encoded_len());
                let back = decode_continuous(&space, &e1).unwrap();
                prop_assert!((back[0] - x1).abs() < 1e-12);
                prop_assert!((back[1] - x3).abs() < 1e-12);
            }

            #[test]
            fn standardize_round_trips(ys in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
                let ds = Dataset::from_pairs(
                    ys.iter().map(|&y| (Point::categories(&[0]), y))
                ).unwrap();
                let ds = standardize(&ds).unwrap();
                for o in ds.observations() {
                    let back = ds.from_standard(o.y_std);
                    prop_assert!((back - o.y).abs() <= 1e-12 * o.y.abs().max(1.0));
                }
            }
        }
    }
}
