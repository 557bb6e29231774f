//! Aggregate CSV summaries over one or more run directories.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use moelab_core::metrics::{consistency, expert_token_ratio, fanout_stats};

use crate::config::RunConfig;
use crate::error::{io_err, Result};
use crate::run::{RunSummary, CONFIG_FILE, LOG_FILE, SUMMARY_FILE, TRACE_DIR};
use crate::runlog::{write_table, Table};
use crate::trace::TraceFile;

pub const LOSS_CURVES: [&str; 7] = ["run", "mode", "seed", "step", "split", "ce_loss", "aux_loss"];
pub const CUTOFF_USAGE: [&str; 8] = ["run", "mode", "step", "split", "layer", "expert", "usage", "cutoff"];
pub const FANOUT_POSITION: [&str; 5] = ["run", "mode", "position", "count", "mean_fanout"];
pub const FANOUT_LOSS: [&str; 8] = ["run", "mode", "bin", "loss_lo", "loss_hi", "count", "mean_loss", "mean_fanout"];
pub const EXPERT_TOKEN_RATIO: [&str; 6] = ["run", "mode", "domain", "layer", "expert", "ratio"];
pub const CONSISTENCY: [&str; 10] = [
    "run",
    "mode",
    "step",
    "reference_step",
    "weighted_jaccard",
    "weighted_dice",
    "jaccard",
    "dice",
    "joint_jsd",
    "total_variation",
];
pub const SUMMARY: [&str; 5] = ["run", "mode", "seed", "total_steps", "final_eval_ce"];

pub const LOSS_BINS: usize = 10;

/// Output file names paired with their headers.
pub fn report_files() -> [(&'static str, &'static [&'static str]); 7] {
    [
        ("loss_curves.csv", &LOSS_CURVES),
        ("cutoff_usage.csv", &CUTOFF_USAGE),
        ("fanout_position.csv", &FANOUT_POSITION),
        ("fanout_loss.csv", &FANOUT_LOSS),
        ("expert_token_ratio.csv", &EXPERT_TOKEN_RATIO),
        ("consistency.csv", &CONSISTENCY),
        ("summary.csv", &SUMMARY),
    ]
}

pub fn list_traces(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = run_dir.join(TRACE_DIR);
    let mut out: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Default)]
struct Rows {
    loss: Vec<Vec<String>>,
    cutoff: Vec<Vec<String>>,
    fan_pos: Vec<Vec<String>>,
    fan_loss: Vec<Vec<String>>,
    ratio: Vec<Vec<String>>,
    consistency: Vec<Vec<String>>,
    summary: Vec<Vec<String>>,
}

/// `usage_l{l}_e{e}` → `(l, e)`
fn parse_expert_col(name: &str, prefix: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix(prefix)?.strip_prefix("_l")?;
    let (l, e) = rest.split_once("_e")?;
    Some((l.parse().ok()?, e.parse().ok()?))
}

fn add_run(dir: &Path, rows: &mut Rows) -> Result<()> {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let mode = cfg.model.routing_mode.to_string();
    let seed = cfg.train.seed.to_string();
    let log = Table::read(&dir.join(LOG_FILE))?;
    let (c_step, c_split, c_ce, c_aux) = (log.column("step")?, log.column("split")?, log.column("ce_loss")?, log.column("aux_loss")?);
    let usage_cols: Vec<(usize, usize, usize, Option<usize>)> = log
        .header
        .iter()
        .enumerate()
        .filter_map(|(j, h)| {
            let (l, e) = parse_expert_col(h, "usage")?;
            Some((j, l, e, log.column(&format!("cutoff_l{l}_e{e}")).ok()))
        })
        .collect();
    for r in &log.rows {
        rows.loss.push(vec![name.clone(), mode.clone(), seed.clone(), r[c_step].clone(), r[c_split].clone(), r[c_ce].clone(), r[c_aux].clone()]);
        for &(j, l, e, cut) in &usage_cols {
            let cutoff = cut.map(|c| r[c].clone()).unwrap_or_default();
            rows.cutoff.push(vec![
                name.clone(),
                mode.clone(),
                r[c_step].clone(),
                r[c_split].clone(),
                l.to_string(),
                e.to_string(),
                r[j].clone(),
                cutoff,
            ]);
        }
    }

    let traces = list_traces(dir)?;
    let loaded: Vec<TraceFile> = traces.iter().map(|p| TraceFile::read(p)).collect::<Result<_>>()?;
    if let Some(last) = loaded.last() {
        let reference = last.to_routing_trace()?;
        let fan = fanout_stats(&reference, LOSS_BINS)?;
        for p in &fan.by_position {
            rows.fan_pos.push(vec![name.clone(), mode.clone(), p.position.to_string(), p.count.to_string(), p.mean_fanout.to_string()]);
        }
        for (b, bin) in fan.by_loss.iter().enumerate() {
            rows.fan_loss.push(vec![
                name.clone(),
                mode.clone(),
                b.to_string(),
                bin.loss_lo.to_string(),
                bin.loss_hi.to_string(),
                bin.count.to_string(),
                bin.mean_loss.to_string(),
                bin.mean_fanout.to_string(),
            ]);
        }
        let domains: BTreeSet<&str> = last.records.iter().map(|r| r.domain.as_str()).collect();
        for domain in domains {
            for (m, layer) in expert_token_ratio(&reference, domain)?.iter().enumerate() {
                for (e, ratio) in layer.iter().enumerate() {
                    rows.ratio.push(vec![
                        name.clone(),
                        mode.clone(),
                        domain.to_string(),
                        last.header.moe_layers[m].to_string(),
                        e.to_string(),
                        ratio.to_string(),
                    ]);
                }
            }
        }
        for t in &loaded {
            let c = consistency(&t.to_routing_trace()?, &reference)?;
            rows.consistency.push(vec![
                name.clone(),
                mode.clone(),
                t.header.step.to_string(),
                last.header.step.to_string(),
                c.weighted_jaccard.to_string(),
                c.weighted_dice.to_string(),
                c.jaccard.to_string(),
                c.dice.to_string(),
                c.joint_jsd.to_string(),
                c.total_variation.to_string(),
            ]);
        }
    }

    let summary_path = dir.join(SUMMARY_FILE);
    if summary_path.exists() {
        let text = std::fs::read_to_string(&summary_path).map_err(io_err(&summary_path))?;
        let s: RunSummary = serde_json::from_str(&text)?;
        rows.summary.push(vec![name, s.mode, s.seed.to_string(), s.total_steps.to_string(), s.final_eval_ce.to_string()]);
    }
    Ok(())
}

/// Writes every report CSV into `out` and returns their paths.
pub fn write_report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut rows = Rows::default();
    for d in run_dirs {
        add_run(d, &mut rows)?;
    }
    let bodies = [&rows.loss, &rows.cutoff, &rows.fan_pos, &rows.fan_loss, &rows.ratio, &rows.consistency, &rows.summary];
    let mut paths = Vec::new();
    for ((file, header), body) in report_files().into_iter().zip(bodies) {
        let p = out.join(file);
        write_table(&p, header, body)?;
        paths.push(p);
    }
    Ok(paths)
}
