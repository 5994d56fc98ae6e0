//! Per-iteration training telemetry.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub stage: String,
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub ema_dist: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: [&str; 6] = ["stage", "iter", "loss", "grad_norm", "ema_dist", "wall_ms"];

/// Append-only CSV writer for [`MetricsRow`]s.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    /// With `header` set the column names are written first; leave it unset
    /// when appending to an existing log.
    pub fn new(out: W, header: bool) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        if header {
            inner.write_record(METRICS_HEADER)?;
        }
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.write_record([
            row.stage.clone(),
            row.iter.to_string(),
            format!("{:?}", row.loss),
            format!("{:?}", row.grad_norm),
            format!("{:?}", row.ema_dist),
            row.wall_ms.to_string(),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}
