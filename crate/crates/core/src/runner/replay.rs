//! Offline verification of a persisted trace.

use std::path::Path;

use crate::benchmarks::Sense;
use crate::error::Result;
use crate::recursive::{should_finetune, TriggerConfig, TriggerState};
use crate::runner::persist::{
    read_text, summary_from_json, trace_from_csv, trigger_from_csv, IterationRecord, TriggerRow, RESULT_FILE,
    TRIGGER_FILE,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub rows: usize,
    pub best: Option<f64>,
    pub trigger_rows_checked: usize,
    pub issues: Vec<String>,
}

impl ReplayReport {
    pub fn ok(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Recomputes the running best and checks it against the logged column.
pub fn check_best_so_far(rows: &[IterationRecord], sense: Sense) -> (Option<f64>, Vec<String>) {
    let mut issues = Vec::new();
    let mut best: Option<f64> = None;
    let mut prev_logged: Option<f64> = None;
    for (i, r) in rows.iter().enumerate() {
        if r.t != i {
            issues.push(format!("row {i}: t is {}", r.t));
        }
        if let Some(prev) = prev_logged {
            if sense.better(prev, r.best_so_far) {
                issues.push(format!(
                    "t={}: best_so_far moved backwards from {prev} to {}",
                    r.t, r.best_so_far
                ));
            }
        }
        prev_logged = Some(r.best_so_far);
        best = Some(match best {
            Some(b) if !sense.better(r.y, b) => b,
            _ => r.y,
        });
        if best != Some(r.best_so_far) {
            issues.push(format!(
                "t={}: logged best_so_far {} but recomputed {}",
                r.t,
                r.best_so_far,
                best.unwrap_or(f64::NAN)
            ));
        }
    }
    (best, issues)
}

/// Re-derives each fine-tune decision from the logged marginal likelihoods.
pub fn check_trigger(rows: &[IterationRecord], trigger: &[TriggerRow], cfg: &TriggerConfig) -> Vec<String> {
    let mut issues = Vec::new();
    let mut state = TriggerState::default();
    for tr in trigger {
        let decision = should_finetune(cfg, &state, tr.log_marginal);
        if decision.finetune != tr.fine_tuned {
            issues.push(format!(
                "t={}: trigger log says fine_tuned={} but the rule gives {}",
                tr.t, tr.fine_tuned, decision.finetune
            ));
        }
        if decision.tracked.to_bits() != tr.tracked.to_bits() && !(decision.tracked.is_nan() && tr.tracked.is_nan()) {
            issues.push(format!(
                "t={}: tracked value {} differs from recomputed {}",
                tr.t, tr.tracked, decision.tracked
            ));
        }
        match rows.get(tr.t) {
            Some(r) if r.fine_tuned != decision.finetune => issues.push(format!(
                "t={}: trace flag fine_tuned={} but the rule gives {}",
                tr.t, r.fine_tuned, decision.finetune
            )),
            None => issues.push(format!("t={}: trigger row has no trace row", tr.t)),
            _ => {}
        }
        state = if decision.finetune {
            TriggerState::default()
        } else {
            decision.state
        };
    }
    let logged: std::collections::HashSet<usize> = trigger.iter().map(|r| r.t).collect();
    for r in rows {
        if r.fine_tuned && !logged.contains(&r.t) {
            issues.push(format!("t={}: fine_tuned set without a trigger record", r.t));
        }
    }
    issues
}

/// Replays `trace` (and, when present, its sibling summary and trigger log).
///
/// `sense` overrides the sense recorded in the summary; without either the
/// trace is read as a maximization.
pub fn replay(trace: &Path, sense: Option<Sense>) -> Result<ReplayReport> {
    let rows = trace_from_csv(&read_text(trace)?)?;
    let dir = trace.parent().unwrap_or(Path::new("."));
    let summary = match dir.join(RESULT_FILE) {
        p if p.exists() => Some(summary_from_json(&read_text(&p)?)?),
        _ => None,
    };
    let sense = sense.or(summary.as_ref().map(|s| s.sense)).unwrap_or(Sense::Maximize);
    let (best, mut issues) = check_best_so_far(&rows, sense);

    let mut trigger_rows_checked = 0;
    let trigger_path = dir.join(TRIGGER_FILE);
    if let (Some(summary), true) = (&summary, trigger_path.exists()) {
        let trigger = trigger_from_csv(&read_text(&trigger_path)?)?;
        trigger_rows_checked = trigger.len();
        issues.extend(check_trigger(&rows, &trigger, &summary.config.trigger));
    }
    Ok(ReplayReport {
        rows: rows.len(),
        best,
        trigger_rows_checked,
        issues,
    })
}
