//! On-disk artifacts of a run: trace, weights, trigger log, result summary
//! and the ensemble checkpoint.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::backbone::{Activation, AdapterLayer, Backbone};
use crate::benchmarks::Sense;
use crate::ensemble::{Ensemble, EnsembleMember};
use crate::error::{Error, Result};
use crate::head::VbllHead;
use crate::problem::Point;
use crate::runner::config::RunConfig;

pub const TRACE_HEADER: &str = "t,point,y,best_so_far,member,fine_tuned,wall_ms";
pub const TRIGGER_HEADER: &str = "t,log_marginal,tracked,fine_tuned";

pub const TRACE_FILE: &str = "trace.csv";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const TRIGGER_FILE: &str = "trigger.csv";
pub const RESULT_FILE: &str = "result.json";
pub const CHECKPOINT_FILE: &str = "checkpoint";

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_num(s: &str, what: &str, line: usize) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Trace(format!("line {line}: bad {what} {s:?}")))
}

fn parse_bool(s: &str, line: usize) -> Result<bool> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Trace(format!("line {line}: bad flag {s:?}"))),
    }
}

/// One evaluated point. Initial-design rows carry no member.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub t: usize,
    pub point: Point,
    pub y: f64,
    /// In the problem's own sense.
    pub best_so_far: f64,
    pub member: Option<usize>,
    pub fine_tuned: bool,
    pub wall_ms: u64,
}

pub fn trace_to_csv(rows: &[IterationRecord]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.t,
            r.point,
            num(r.y),
            num(r.best_so_far),
            r.member.map(|m| m.to_string()).unwrap_or_default(),
            r.fine_tuned,
            r.wall_ms
        ));
    }
    out
}

fn data_lines<'a>(text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, Vec<&'a str>)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == header => {}
        other => {
            return Err(Error::Trace(format!(
                "expected header {header:?}, found {:?}",
                other.unwrap_or("")
            )));
        }
    }
    Ok(lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 2, l.trim_end().split(',').collect())))
}

pub fn trace_from_csv(text: &str) -> Result<Vec<IterationRecord>> {
    data_lines(text, TRACE_HEADER)?
        .map(|(line, f)| {
            if f.len() != 7 {
                return Err(Error::Trace(format!(
                    "line {line}: expected 7 fields, found {}",
                    f.len()
                )));
            }
            Ok(IterationRecord {
                t: f[0]
                    .parse()
                    .map_err(|_| Error::Trace(format!("line {line}: bad t {:?}", f[0])))?,
                point: f[1].parse()?,
                y: parse_num(f[2], "y", line)?,
                best_so_far: parse_num(f[3], "best_so_far", line)?,
                member: if f[4].is_empty() {
                    None
                } else {
                    Some(
                        f[4].parse()
                            .map_err(|_| Error::Trace(format!("line {line}: bad member {:?}", f[4])))?,
                    )
                },
                fine_tuned: parse_bool(f[5], line)?,
                wall_ms: f[6]
                    .parse()
                    .map_err(|_| Error::Trace(format!("line {line}: bad wall_ms {:?}", f[6])))?,
            })
        })
        .collect()
}

/// Mixture weights after the update at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsRow {
    pub t: usize,
    pub weights: Vec<f64>,
}

pub fn weights_header(j: usize) -> String {
    let mut h = String::from("t");
    for i in 1..=j {
        h.push_str(&format!(",w_{i}"));
    }
    h
}

pub fn weights_to_csv(j: usize, rows: &[WeightsRow]) -> String {
    let mut out = weights_header(j);
    out.push('\n');
    for r in rows {
        out.push_str(&r.t.to_string());
        for w in &r.weights {
            out.push(',');
            out.push_str(&num(*w));
        }
        out.push('\n');
    }
    out
}

pub fn weights_from_csv(text: &str) -> Result<Vec<WeightsRow>> {
    let header = text.lines().next().unwrap_or("");
    let j = header.split(',').count().saturating_sub(1);
    if j == 0 || header != weights_header(j) {
        return Err(Error::Trace(format!("bad weights header {header:?}")));
    }
    data_lines(text, header)?
        .map(|(line, f)| {
            if f.len() != j + 1 {
                return Err(Error::Trace(format!("line {line}: expected {} fields", j + 1)));
            }
            Ok(WeightsRow {
                t: f[0].parse().map_err(|_| Error::Trace(format!("line {line}: bad t")))?,
                weights: f[1..]
                    .iter()
                    .map(|s| parse_num(s, "weight", line))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Trigger inputs and outcome for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerRow {
    pub t: usize,
    pub log_marginal: f64,
    pub tracked: f64,
    pub fine_tuned: bool,
}

pub fn trigger_to_csv(rows: &[TriggerRow]) -> String {
    let mut out = String::from(TRIGGER_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.t,
            num(r.log_marginal),
            num(r.tracked),
            r.fine_tuned
        ));
    }
    out
}

pub fn trigger_from_csv(text: &str) -> Result<Vec<TriggerRow>> {
    data_lines(text, TRIGGER_HEADER)?
        .map(|(line, f)| {
            if f.len() != 4 {
                return Err(Error::Trace(format!("line {line}: expected 4 fields")));
            }
            Ok(TriggerRow {
                t: f[0].parse().map_err(|_| Error::Trace(format!("line {line}: bad t")))?,
                log_marginal: parse_num(f[1], "log_marginal", line)?,
                tracked: parse_num(f[2], "tracked", line)?,
                fine_tuned: parse_bool(f[3], line)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub point: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_point: Point,
    pub best_value: f64,
    pub sense: Sense,
    pub seed: u64,
    pub evaluations: usize,
    pub finetunes: usize,
    /// Set when a finite pool ran out before the budget did.
    pub stopped_early: bool,
    pub failures: Vec<FailureRecord>,
    pub config: RunConfig,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn summary_to_json(s: &RunSummary) -> Result<String> {
    let mut text = serde_json::to_string_pretty(s)?;
    text.push('\n');
    Ok(text)
}

pub fn summary_from_json(text: &str) -> Result<RunSummary> {
    Ok(serde_json::from_str(text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MemberMeta {
    rank: usize,
    seed: u64,
    input_dim: usize,
    layers: usize,
    activation: Activation,
    dropout: f64,
    lora_alpha: f64,
    cache: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EnsembleMeta {
    temperature: f64,
    members: Vec<MemberMeta>,
}

fn bytes_of(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(f64::to_le_bytes).collect()
}

/// Row-major bytes of a matrix.
fn matrix_bytes(m: &DMatrix<f64>) -> (Vec<usize>, Vec<u8>) {
    let (r, c) = m.shape();
    (
        vec![r, c],
        bytes_of((0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)]))),
    )
}

fn ckpt_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Every member parameter as named f64 tensors, with shape metadata.
pub fn checkpoint_bytes(ens: &Ensemble) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut members = Vec::new();
    for (j, m) in ens.members().iter().enumerate() {
        let bb = &m.backbone;
        members.push(MemberMeta {
            rank: m.rank,
            seed: m.seed,
            input_dim: bb.input_dim(),
            layers: bb.layers().len(),
            activation: bb.activation(),
            dropout: bb.dropout(),
            lora_alpha: bb.layers().first().map_or(1.0, AdapterLayer::lora_alpha),
            cache: m.cache.enabled(),
        });
        for (l, layer) in bb.layers().iter().enumerate() {
            for (name, mat) in [("w0", layer.w0()), ("a", layer.a()), ("b", layer.b())] {
                let (shape, data) = matrix_bytes(mat);
                tensors.push((format!("m{j}.l{l}.{name}"), shape, data));
            }
            tensors.push((
                format!("m{j}.l{l}.bias"),
                vec![layer.bias().len()],
                bytes_of(layer.bias().iter().copied()),
            ));
        }
        let h = &m.head;
        tensors.push((format!("m{j}.mu"), vec![h.dim()], bytes_of(h.mu().iter().copied())));
        let (shape, data) = matrix_bytes(h.chol());
        tensors.push((format!("m{j}.chol"), shape, data));
        tensors.push((
            format!("m{j}.scalars"),
            vec![3],
            bytes_of([h.log_noise(), h.prior_var(), m.last_elbo]),
        ));
    }
    tensors.push((
        "log_weights".into(),
        vec![ens.len()],
        bytes_of(ens.log_weights().iter().copied()),
    ));
    tensors.push((
        "prior_log_weights".into(),
        vec![ens.len()],
        bytes_of(ens.prior_log_weights().iter().copied()),
    ));

    let meta = EnsembleMeta {
        temperature: ens.temperature(),
        members,
    };
    let info = Some(HashMap::from([("ensemble".to_string(), serde_json::to_string(&meta)?)]));
    let views = tensors
        .iter()
        .map(|(name, shape, data)| {
            Ok((
                name.clone(),
                TensorView::new(Dtype::F64, shape.clone(), data).map_err(ckpt_err)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::tensor::serialize(views, &info).map_err(ckpt_err)
}

fn tensor_values(st: &SafeTensors<'_>, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let t = st.tensor(name).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    if t.dtype() != Dtype::F64 {
        return Err(Error::Checkpoint(format!("{name}: expected f64")));
    }
    let values = t
        .data()
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((t.shape().to_vec(), values))
}

fn matrix(st: &SafeTensors<'_>, name: &str) -> Result<DMatrix<f64>> {
    match tensor_values(st, name)? {
        (shape, v) if shape.len() == 2 => Ok(DMatrix::from_row_slice(shape[0], shape[1], &v)),
        (shape, _) => Err(Error::Checkpoint(format!(
            "{name}: expected a matrix, got shape {shape:?}"
        ))),
    }
}

fn vector(st: &SafeTensors<'_>, name: &str) -> Result<Vec<f64>> {
    match tensor_values(st, name)? {
        (shape, v) if shape.len() == 1 => Ok(v),
        (shape, _) => Err(Error::Checkpoint(format!(
            "{name}: expected a vector, got shape {shape:?}"
        ))),
    }
}

pub fn ensemble_from_checkpoint(bytes: &[u8]) -> Result<Ensemble> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(ckpt_err)?;
    let meta_text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("ensemble"))
        .ok_or_else(|| Error::Checkpoint("missing ensemble metadata".into()))?;
    let meta: EnsembleMeta = serde_json::from_str(meta_text).map_err(ckpt_err)?;
    let st = SafeTensors::deserialize(bytes).map_err(ckpt_err)?;
    let mut members = Vec::with_capacity(meta.members.len());
    for (j, mm) in meta.members.iter().enumerate() {
        let backbone = if mm.layers == 0 {
            Backbone::identity(mm.input_dim)
        } else {
            let layers = (0..mm.layers)
                .map(|l| {
                    AdapterLayer::from_parts(
                        matrix(&st, &format!("m{j}.l{l}.w0"))?,
                        DVector::from_vec(vector(&st, &format!("m{j}.l{l}.bias"))?),
                        matrix(&st, &format!("m{j}.l{l}.a"))?,
                        matrix(&st, &format!("m{j}.l{l}.b"))?,
                        mm.lora_alpha,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Backbone::from_layers(layers, mm.activation, mm.dropout)?
        };
        let scalars = vector(&st, &format!("m{j}.scalars"))?;
        if scalars.len() != 3 {
            return Err(Error::Checkpoint(format!("m{j}.scalars: expected 3 values")));
        }
        let head = VbllHead::from_parts(
            DVector::from_vec(vector(&st, &format!("m{j}.mu"))?),
            matrix(&st, &format!("m{j}.chol"))?,
            scalars[0],
            scalars[1],
        )?;
        let mut member = EnsembleMember::new(mm.rank, mm.seed, backbone, head, mm.cache)?;
        member.last_elbo = scalars[2];
        members.push(member);
    }
    Ensemble::from_parts(
        members,
        vector(&st, "log_weights")?,
        vector(&st, "prior_log_weights")?,
        meta.temperature,
    )
}

pub fn write_checkpoint(path: &Path, ens: &Ensemble) -> Result<()> {
    fs::write(path, checkpoint_bytes(ens)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Ensemble> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ensemble_from_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::ensemble::EnsembleConfig;

    fn record(t: usize, member: Option<usize>) -> IterationRecord {
        IterationRecord {
            t,
            point: Point::categories(&[t, 1, 0]),
            y: 0.1 * t as f64 - 1.0 / 3.0,
            best_so_far: 0.1 * t as f64,
            member,
            fine_tuned: t.is_multiple_of(2),
            wall_ms: 0,
        }
    }

    #[test]
    fn empty_trace_is_header_only() {
        assert_eq!(trace_to_csv(&[]), format!("{TRACE_HEADER}\n"));
        assert!(trace_from_csv(&trace_to_csv(&[])).unwrap().is_empty());
    }

    #[test]
    fn trace_round_trips_bytewise() {
        let rows = vec![record(0, None), record(1, None), record(2, Some(3))];
        let text = trace_to_csv(&rows);
        let back = trace_from_csv(&text).unwrap();
        assert_eq!(back, rows);
        assert_eq!(trace_to_csv(&back), text);
        assert!(trace_from_csv("t,point\n").is_err());
    }

    #[test]
    fn weights_rows_sum_to_one_after_text_round_trip() {
        let raw = [0.1f64, 0.2, 0.3, 0.4];
        let rows = vec![
            WeightsRow {
                t: 4,
                weights: raw.to_vec(),
            },
            WeightsRow {
                t: 5,
                weights: vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
            },
        ];
        let back = weights_from_csv(&weights_to_csv(4, &rows)).unwrap();
        assert_eq!(back, rows);
        for r in back {
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn trigger_round_trip() {
        let rows = vec![TriggerRow {
            t: 10,
            log_marginal: -5.25,
            tracked: -5.25,
            fine_tuned: true,
        }];
        assert_eq!(trigger_from_csv(&trigger_to_csv(&rows)).unwrap(), rows);
    }

    #[test]
    fn checkpoint_round_trips_bytewise() {
        let bb = BackboneConfig {
            input_dim: 6,
            hidden: vec![5],
            output_dim: 4,
            ..Default::default()
        };
        let cfg = EnsembleConfig {
            ranks: vec![1, 2],
            ..Default::default()
        };
        let mut ens = Ensemble::init(&bb, &cfg, true, 3).unwrap();
        ens.set_log_weights(vec![-0.3, -1.4]).unwrap();
        ens.members_mut()[1].last_elbo = -12.5;
        let bytes = checkpoint_bytes(&ens).unwrap();
        let back = ensemble_from_checkpoint(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
        assert_eq!(back.log_weights(), ens.log_weights());
        for (a, b) in back.members().iter().zip(ens.members()) {
            assert_eq!(a.backbone, b.backbone);
            assert_eq!(a.head, b.head);
        }

        let bypass = EnsembleConfig {
            ranks: vec![1],
            bypass_backbone: true,
            ..Default::default()
        };
        let ens = Ensemble::init(&bb, &bypass, false, 0).unwrap();
        let back = ensemble_from_checkpoint(&checkpoint_bytes(&ens).unwrap()).unwrap();
        assert_eq!(back.members()[0].backbone, ens.members()[0].backbone);
        assert!(ensemble_from_checkpoint(b"junk").is_err());
    }
}
