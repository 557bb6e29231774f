//! Full training runs with their on-disk artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use moelab_lm::{LmError, StepRecord, Trainer};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::corpus::{stream_hash, Corpus};
use crate::error::{io_err, HarnessError, Result};
use crate::runlog::RunLogWriter;
use crate::trace::TraceFile;

pub const LOG_FILE: &str = "log.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const ABORT_CHECKPOINT_FILE: &str = "last_good.bin";
pub const TRACE_DIR: &str = "traces";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub seed: u64,
    pub total_steps: u64,
    pub final_eval_ce: f64,
    pub seconds: f64,
    pub corpus_hash: String,
    pub eval_stream_hash: String,
    pub param_count: usize,
    pub active_param_count: usize,
    /// Every parameter group uses AdamW in this implementation.
    pub optimizer: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub records: Vec<StepRecord>,
}

pub fn trace_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(TRACE_DIR).join(format!("eval_{step:06}.jsonl"))
}

struct Sink {
    dir: PathBuf,
    log: RunLogWriter,
    digest: String,
    n_experts: usize,
}

impl Sink {
    fn observe(&mut self, rec: &StepRecord, eval: Option<&moelab_lm::EvalResult>) -> Result<()> {
        self.log.write(rec)?;
        if let Some(res) = eval {
            self.log.flush()?;
            TraceFile::from_eval(res, self.n_experts, rec.step, &self.digest).write(&trace_path(&self.dir, rec.step))?;
        }
        Ok(())
    }
}

/// Trains `cfg` on `corpus`. With `out`, writes the config, run log, eval
/// traces, final checkpoint and summary there; a diverged run leaves its
/// last good state in `last_good.bin`.
pub fn train_run(cfg: &RunConfig, corpus: &Corpus, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let plan = cfg.plan()?;
    let mut trainer = Trainer::<f32>::new(plan.clone(), cfg.model.clone())?;
    let eval_hash = stream_hash(&corpus.eval);
    let moe_layers = cfg.model.moe_layers();
    let n_experts = cfg.model.n_routed_experts;

    let mut sink = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir.join(TRACE_DIR)).map_err(io_err(dir))?;
            let cfg_path = dir.join(CONFIG_FILE);
            std::fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;
            Some(Sink {
                dir: dir.to_path_buf(),
                log: RunLogWriter::create(&dir.join(LOG_FILE), &moe_layers, n_experts)?,
                digest: cfg.model_digest(),
                n_experts,
            })
        }
        None => None,
    };
    log::info!(
        "training {} seed {} for {} steps ({} params, {} active)",
        cfg.model.routing_mode,
        plan.seed,
        plan.total_steps,
        trainer.model.param_count(),
        trainer.model.active_param_count()
    );

    let start = Instant::now();
    let mut records = Vec::new();
    let mut sink_err: Option<HarnessError> = None;
    let result = trainer.run(&corpus.train, &corpus.eval, |rec, eval| {
        records.push(rec.clone());
        if let Some(s) = sink.as_mut() {
            if let Err(e) = s.observe(rec, eval) {
                sink_err = Some(e);
                return Err(LmError::InvalidInput("run output failed".into()));
            }
        }
        Ok(())
    });
    if let Some(e) = sink_err {
        return Err(e);
    }
    let final_eval = match result {
        Ok(r) => r,
        Err(LmError::NonFinite(detail)) => {
            let checkpoint = match out {
                Some(dir) => {
                    let p = dir.join(ABORT_CHECKPOINT_FILE);
                    checkpoint::save(&p, &trainer, &eval_hash)?;
                    p.display().to_string()
                }
                None => "not written".into(),
            };
            return Err(HarnessError::Diverged { detail, checkpoint });
        }
        Err(e) => return Err(e.into()),
    };
    let summary = RunSummary {
        mode: cfg.model.routing_mode.to_string(),
        seed: plan.seed,
        total_steps: plan.total_steps,
        final_eval_ce: final_eval.ce_loss,
        seconds: start.elapsed().as_secs_f64(),
        corpus_hash: corpus.hash.clone(),
        eval_stream_hash: eval_hash.clone(),
        param_count: trainer.model.param_count(),
        active_param_count: trainer.model.active_param_count(),
        optimizer: "adamw".into(),
    };
    if let (Some(dir), Some(mut s)) = (out, sink) {
        s.log.flush()?;
        checkpoint::save(&dir.join(CHECKPOINT_FILE), &trainer, &eval_hash)?;
        let p = dir.join(SUMMARY_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(io_err(&p))?;
    }
    Ok(RunOutcome { summary, records })
}
