//! Gradient-spike summaries of a metrics log.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{MetricsRow, METRICS_HEADER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub iterations: usize,
    pub max_grad_norm: f64,
    /// First iteration whose gradient norm exceeded the threshold.
    pub first_spike: Option<usize>,
    pub spikes: usize,
    pub diverged: bool,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstabilityReport {
    pub threshold: f64,
    pub patience: usize,
    /// In order of first appearance in the log.
    pub stages: Vec<StageSummary>,
}

/// Reads a metrics CSV. Errors carry the 1-based line number.
pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut rows = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 1;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if idx == 0 {
            if rec.iter().ne(METRICS_HEADER) {
                return Err(Error::Parse {
                    line,
                    message: format!("expected header {}", METRICS_HEADER.join(",")),
                });
            }
            continue;
        }
        if rec.len() != METRICS_HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!(
                    "expected {} fields, found {}",
                    METRICS_HEADER.len(),
                    rec.len()
                ),
            });
        }
        let bad = |what: &str, v: &str| Error::Parse {
            line,
            message: format!("invalid {what} {v:?}"),
        };
        let float = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|_| bad(METRICS_HEADER[i], &rec[i]))
        };
        rows.push(MetricsRow {
            stage: rec[0].to_string(),
            iter: rec[1].parse().map_err(|_| bad("iter", &rec[1]))?,
            loss: float(2)?,
            grad_norm: float(3)?,
            ema_dist: float(4)?,
            wall_ms: rec[5].parse().map_err(|_| bad("wall_ms", &rec[5]))?,
        });
    }
    Ok(rows)
}

/// A stage counts as diverged when its loss or gradient norm went
/// non-finite or `patience` consecutive iterations exceeded `threshold`.
pub fn instability_summary(
    rows: &[MetricsRow],
    threshold: f64,
    patience: usize,
) -> InstabilityReport {
    let mut stages: Vec<(StageSummary, usize)> = Vec::new();
    for r in rows {
        let pos = match stages.iter().position(|(s, _)| s.stage == r.stage) {
            Some(p) => p,
            None => {
                stages.push((
                    StageSummary {
                        stage: r.stage.clone(),
                        iterations: 0,
                        max_grad_norm: 0.0,
                        first_spike: None,
                        spikes: 0,
                        diverged: false,
                        final_loss: None,
                    },
                    0,
                ));
                stages.len() - 1
            }
        };
        let (s, run) = &mut stages[pos];
        s.iterations += 1;
        s.final_loss = Some(r.loss);
        if r.grad_norm.is_finite() {
            s.max_grad_norm = s.max_grad_norm.max(r.grad_norm);
        }
        if !r.loss.is_finite() || !r.grad_norm.is_finite() {
            s.diverged = true;
        }
        if !(r.grad_norm <= threshold) {
            s.spikes += 1;
            s.first_spike.get_or_insert(r.iter);
            *run += 1;
            if *run >= patience {
                s.diverged = true;
            }
        } else {
            *run = 0;
        }
    }
    InstabilityReport {
        threshold,
        patience,
        stages: stages.into_iter().map(|(s, _)| s).collect(),
    }
}
