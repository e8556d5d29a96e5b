//! Comma-separated metric reports.

use std::path::Path;

use crate::error::{HarnessError, Result};
use crate::metrics::{Metrics, MetricsReport};

pub const HEADER: [&str; 8] = ["model", "split", "horizon", "mae", "mse", "rmse", "count", "note"];

/// One report row group: every horizon of `report` for `model` on `split`.
pub struct ReportRows<'a> {
    pub model: &'a str,
    pub split: &'a str,
    pub report: &'a MetricsReport,
}

fn record(model: &str, split: &str, horizon: &str, m: &Metrics, note: &str) -> [String; 8] {
    [
        model.to_string(),
        split.to_string(),
        horizon.to_string(),
        format!("{:.9}", m.mae),
        format!("{:.9}", m.mse),
        format!("{:.9}", m.rmse),
        m.count.to_string(),
        note.to_string(),
    ]
}

/// Rows `all`, `1..=T` and, when present, `raw` (denormalised scale).
pub fn write_csv(path: &Path, groups: &[ReportRows<'_>]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(HarnessError::io(parent))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for g in groups {
        let r = g.report;
        w.write_record(record(g.model, g.split, "all", &r.overall, &r.note))?;
        for (h, m) in r.per_horizon.iter().enumerate() {
            w.write_record(record(g.model, g.split, &(h + 1).to_string(), m, ""))?;
        }
        if let Some(m) = &r.denormalized {
            w.write_record(record(g.model, g.split, "raw", m, ""))?;
        }
    }
    w.flush().map_err(HarnessError::io(path))
}

/// Per-update training losses.
pub fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["update", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:.9}")])?;
    }
    w.flush().map_err(HarnessError::io(path))
}
