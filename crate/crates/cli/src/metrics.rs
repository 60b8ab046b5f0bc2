//! `metrics.csv`: a version comment line, then a fixed header.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use proteus_core::distill::LossBreakdown;
use serde::{Deserialize, Serialize};

pub const VERSION_LINE: &str = "# proteus metrics v1";
pub const COLUMNS: [&str; 10] = [
    "step", "epoch", "lr", "loss_token", "loss_feat", "loss_patch", "loss_ce", "loss_kl",
    "loss_total", "wall_ms",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_token: f64,
    pub loss_feat: f64,
    pub loss_patch: f64,
    pub loss_ce: f64,
    pub loss_kl: f64,
    pub loss_total: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn new(step: u64, epoch: u64, lr: f64, l: &LossBreakdown, wall_ms: u64) -> Self {
        MetricsRow {
            step,
            epoch,
            lr,
            loss_token: l.token,
            loss_feat: l.feat,
            loss_patch: l.patch,
            loss_ce: l.ce,
            loss_kl: l.kl,
            loss_total: l.total,
            wall_ms,
        }
    }

    pub fn losses(&self) -> LossBreakdown {
        LossBreakdown {
            token: self.loss_token,
            feat: self.loss_feat,
            patch: self.loss_patch,
            ce: self.loss_ce,
            kl: self.loss_kl,
            total: self.loss_total,
        }
    }
}

pub struct MetricsWriter {
    inner: csv::Writer<BufWriter<File>>,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "{VERSION_LINE}")?;
        Ok(MetricsWriter {
            inner: csv::WriterBuilder::new().has_headers(true).from_writer(f),
            last_step: None,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<(), csv::Error> {
        assert!(
            self.last_step.is_none_or(|s| row.step > s),
            "metrics steps must increase"
        );
        self.last_step = Some(row.step);
        self.inner.serialize(row)
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Parses a metrics file strictly: version line, exact header, finite
/// values, increasing steps.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, String> {
    let mut r = BufReader::new(File::open(path).map_err(|e| e.to_string())?);
    let mut first = String::new();
    r.read_line(&mut first).map_err(|e| e.to_string())?;
    if first.trim_end() != VERSION_LINE {
        return Err(format!("unexpected version line {first:?}"));
    }
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
    if header != COLUMNS {
        return Err(format!("unexpected header {header:?}"));
    }
    let mut rows: Vec<MetricsRow> = Vec::new();
    for rec in rd.deserialize() {
        let row: MetricsRow = rec.map_err(|e| e.to_string())?;
        let l = row.losses();
        if ![row.lr, l.token, l.feat, l.patch, l.ce, l.kl, l.total].iter().all(|v| v.is_finite()) {
            return Err(format!("non-finite value at step {}", row.step));
        }
        if rows.last().is_some_and(|p| p.step >= row.step) {
            return Err(format!("step {} does not increase", row.step));
        }
        rows.push(row);
    }
    Ok(rows)
}
