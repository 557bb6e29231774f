//! CSV schemas. Every writer emits a fixed header; per-expert columns are
//! expanded layer-major, `_l{layer}_e{expert}`.

use std::fs::File;
use std::path::Path;

use moelab_lm::StepRecord;

use crate::error::{io_err, HarnessError, Result};

/// Leading and trailing scalar columns of the run log; per-expert usage and
/// cutoff columns sit between `aux_loss` and `saturation`, bias columns
/// between `lr` and `in_warmup`.
pub const RUN_LOG_LEAD: [&str; 4] = ["step", "split", "ce_loss", "aux_loss"];
pub const RUN_LOG_MID: [&str; 3] = ["saturation", "starvation", "lr"];

pub fn expert_columns(prefix: &str, moe_layers: &[usize], n_experts: usize) -> Vec<String> {
    moe_layers
        .iter()
        .flat_map(|l| (0..n_experts).map(move |e| format!("{prefix}_l{l}_e{e}")))
        .collect()
}

pub fn run_log_header(moe_layers: &[usize], n_experts: usize) -> Vec<String> {
    let mut h: Vec<String> = RUN_LOG_LEAD.iter().map(|s| s.to_string()).collect();
    h.extend(expert_columns("usage", moe_layers, n_experts));
    h.extend(expert_columns("cutoff", moe_layers, n_experts));
    h.extend(RUN_LOG_MID.iter().map(|s| s.to_string()));
    h.extend(expert_columns("bias", moe_layers, n_experts));
    h.push("in_warmup".into());
    h
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn run_log_row(rec: &StepRecord, moe_layers: &[usize], n_experts: usize) -> Vec<String> {
    let mut row = vec![rec.step.to_string(), rec.split.name().to_string(), rec.ce_loss.to_string(), rec.aux_loss.to_string()];
    let per_expert = |f: &dyn Fn(&moelab_lm::train::LayerLog, usize) -> Option<f64>| -> Vec<String> {
        moe_layers
            .iter()
            .flat_map(|&l| {
                let log = rec.layers.iter().find(|x| x.layer == l);
                (0..n_experts).map(move |e| opt(log.and_then(|x| f(x, e))))
            })
            .collect()
    };
    row.extend(per_expert(&|x, e| x.usage.get(e).copied()));
    row.extend(per_expert(&|x, e| x.cutoff.as_ref().and_then(|c| c.get(e).copied())));
    row.extend([opt(rec.saturation), opt(rec.starvation), rec.lr.to_string()]);
    row.extend(per_expert(&|x, e| x.bias.as_ref().and_then(|c| c.get(e).copied())));
    row.push(u8::from(rec.in_warmup).to_string());
    row
}

pub struct RunLogWriter {
    w: csv::Writer<File>,
    moe_layers: Vec<usize>,
    n_experts: usize,
}

impl RunLogWriter {
    pub fn create(path: &Path, moe_layers: &[usize], n_experts: usize) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(run_log_header(moe_layers, n_experts))?;
        Ok(Self { w, moe_layers: moe_layers.to_vec(), n_experts })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        self.w.write_record(run_log_row(rec, &self.moe_layers, self.n_experts))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush().map_err(|e| HarnessError::Csv(e.into()))
    }
}

/// A CSV file read as a header plus string rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::Schema(format!("missing column {name:?}")))
    }

    pub fn f64_at(&self, row: usize, col: usize) -> Option<f64> {
        self.rows[row].get(col).and_then(|s| s.parse().ok())
    }
}

pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(io_err(path))
}
