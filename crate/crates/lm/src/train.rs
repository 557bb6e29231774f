//! AdamW, the per-group learning-rate schedule and the training loop.

use moelab_core::balance::BiasMode;
use moelab_core::threshold::{scaled_warmup, REFERENCE_TOTAL_STEPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LmError, Result};
use crate::graph::Graph;
use crate::model::{Batch, Model, ModelConfig, MoeRecord, ParamGroup, RouterSettings, RoutingControl, RoutingMode};
use crate::scalar::Scalar;

/// AdamW warmup of the reference schedule.
pub const REFERENCE_ADAMW_WARMUP: u64 = 250;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    /// Peak rate of the matrix group.
    pub peak: f64,
    /// Final rate as a fraction of each group's peak.
    pub min_fraction: f64,
    /// Linear ramp length for the embedding and head groups.
    pub adamw_warmup_steps: u64,
    /// Embedding peak over matrix peak.
    pub embed_ratio: f64,
    /// Head peak over matrix peak.
    pub head_ratio: f64,
    /// Width multiplier applied to the embedding and head groups.
    pub width_scale: f64,
}

impl LrSchedule {
    /// `(d_model / 768)^(-1/2)`
    pub fn width_scale_for(d_model: usize) -> f64 {
        (d_model as f64 / 768.0).powf(-0.5)
    }

    pub fn for_run(total_steps: u64, d_model: usize) -> Self {
        Self {
            peak: 3e-3,
            min_fraction: 0.1,
            adamw_warmup_steps: ((REFERENCE_ADAMW_WARMUP * total_steps) as f64 / REFERENCE_TOTAL_STEPS as f64).round() as u64,
            embed_ratio: 10.0,
            head_ratio: 0.2,
            width_scale: Self::width_scale_for(d_model),
        }
    }

    pub fn group_peak(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Matrix => self.peak,
            ParamGroup::Embedding => self.peak * self.embed_ratio * self.width_scale,
            ParamGroup::Head => self.peak * self.head_ratio * self.width_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub total_steps: u64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub seq_len: usize,
    pub eval_every: u64,
    /// Eval batches of `batch_size` windows each.
    pub eval_batches: usize,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    pub aux_alpha: f64,
    pub bias_rate: f64,
    pub bias_mode: BiasMode,
    pub et_beta: f64,
    pub et_warmup_steps: u64,
    pub seed: u64,
}

impl TrainPlan {
    /// Desk-scale defaults for a run of `total_steps`.
    pub fn desk(total_steps: u64, model: &ModelConfig) -> Self {
        Self {
            total_steps,
            batch_size: 8,
            seq_len: model.seq_len,
            eval_every: (total_steps / 10).max(1),
            eval_batches: 4,
            lr: LrSchedule::for_run(total_steps, model.d_model),
            adam: AdamConfig::default(),
            aux_alpha: 0.001,
            bias_rate: 0.005,
            bias_mode: BiasMode::Sign,
            et_beta: 0.99,
            et_warmup_steps: scaled_warmup(total_steps),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LmError::InvalidConfig(m.to_string()));
        if self.total_steps == 0 || self.batch_size == 0 || self.seq_len == 0 || self.eval_every == 0 || self.eval_batches == 0 {
            return bad("steps, batch size, sequence length and eval cadence must be positive");
        }
        if !(self.lr.min_fraction > 0.0 && self.lr.min_fraction <= 1.0) {
            return bad("min_fraction must lie in (0, 1]");
        }
        if !(self.lr.peak > 0.0) {
            return bad("peak learning rate must be positive");
        }
        let a = &self.adam;
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0) {
            return bad("Adam betas must lie in (0, 1)");
        }
        if !(self.et_beta > 0.0 && self.et_beta < 1.0) {
            return bad("et_beta must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn batch_tokens(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn router_settings(&self) -> RouterSettings {
        RouterSettings {
            bias_rate: self.bias_rate,
            bias_mode: self.bias_mode,
            et_beta: self.et_beta,
            et_warmup_steps: self.et_warmup_steps,
        }
    }
}

/// Learning rate of `group` at optimizer step `step`. Embedding and head
/// ramp up linearly over the warmup; all groups then decay linearly to
/// `min_fraction * peak` at `total_steps`.
pub fn lr_at(plan: &TrainPlan, group: ParamGroup, step: u64) -> f64 {
    let s = &plan.lr;
    let peak = s.group_peak(group);
    let total = plan.total_steps as f64;
    let step = step.min(plan.total_steps) as f64;
    let warm = match group {
        ParamGroup::Matrix => 0.0,
        _ => s.adamw_warmup_steps.min(plan.total_steps) as f64,
    };
    if step < warm {
        return peak * step / warm;
    }
    let span = total - warm;
    let frac = if span > 0.0 { (step - warm) / span } else { 1.0 };
    peak * (1.0 - (1.0 - s.min_fraction) * frac)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub config: AdamConfig,
    pub step: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(shapes: &[usize], config: AdamConfig) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![S::zero(); n]).collect(),
            config,
            step: 0,
        }
    }

    /// One bias-corrected update of every tensor with its own rate. Nothing
    /// is written when a gradient or an updated value is non-finite.
    pub fn step(&mut self, params: &mut [&mut [S]], grads: &[&[S]], lrs: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || lrs.len() != params.len() {
            return Err(LmError::InvalidShape("optimizer tensor count mismatch".into()));
        }
        for (j, g) in grads.iter().enumerate() {
            if g.len() != self.m[j].len() || params[j].len() != g.len() {
                return Err(LmError::InvalidShape(format!("optimizer tensor {j} length mismatch")));
            }
            if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                return Err(LmError::NonFinite(format!("gradient of tensor {j} at index {k}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let bc1 = S::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = S::lit(1.0 - c.beta2.powi(self.step as i32));
        let eps = S::lit(c.eps);
        let wd = S::lit(c.weight_decay);
        let mut next = Vec::with_capacity(params.len());
        for (j, p) in params.iter().enumerate() {
            let lr = S::lit(lrs[j]);
            let n = p.len();
            let (mut xs, mut ms, mut vs) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for k in 0..n {
                let (x, g) = (p[k], grads[j][k]);
                let mj = b1 * self.m[j][k] + (S::one() - b1) * g;
                let vj = b2 * self.v[j][k] + (S::one() - b2) * g * g;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let xn = x - lr * (mhat / (vhat.sqrt() + eps) + wd * x);
                if !xn.is_finite() {
                    self.step -= 1;
                    return Err(LmError::NonFinite(format!("update of tensor {j} at index {k}")));
                }
                xs.push(xn);
                ms.push(mj);
                vs.push(vj);
            }
            next.push((xs, ms, vs));
        }
        for (j, (xs, ms, vs)) in next.into_iter().enumerate() {
            params[j].copy_from_slice(&xs);
            self.m[j] = ms;
            self.v[j] = vs;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// Per-MoE-layer routing telemetry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerLog {
    pub layer: usize,
    pub usage: Vec<f64>,
    pub cutoff: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// One row of the run log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub split: Split,
    pub ce_loss: f64,
    pub aux_loss: f64,
    /// Matrix-group rate used for this step.
    pub lr: f64,
    /// Means over MoE layers; absent outside training or without routing.
    pub saturation: Option<f64>,
    pub starvation: Option<f64>,
    /// Whether threshold routing ran in its expert-choice warmup.
    pub in_warmup: bool,
    pub layers: Vec<LayerLog>,
}

/// Result of a pass over the held-out windows.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub ce_loss: f64,
    pub token_losses: Vec<f64>,
    pub positions: Vec<usize>,
    /// Input token of each evaluated position.
    pub tokens: Vec<usize>,
    /// `layers[m][t]`: routed experts of token `t` at the m-th MoE layer.
    pub active: Vec<Vec<Vec<u32>>>,
    pub moe_layers: Vec<usize>,
    pub usage: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Trainer<S> {
    pub plan: TrainPlan,
    pub model: Model<S>,
    pub opt: AdamW<S>,
    pub step: u64,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1));
    rng
}

/// `batch_size` random windows of `seq + 1` tokens, drawn from the
/// step-indexed stream so a resumed run sees the same batches.
pub fn sample_batch(stream: &[usize], batch_size: usize, seq: usize, seed: u64, step: u64) -> Result<Batch> {
    if stream.len() < seq + 1 {
        return Err(LmError::InvalidInput(format!("stream of {} tokens shorter than a window of {}", stream.len(), seq + 1)));
    }
    let mut rng = step_rng(seed, step);
    let hi = stream.len() - seq;
    let windows: Vec<&[usize]> = (0..batch_size)
        .map(|_| {
            let s = rng.gen_range(0..hi);
            &stream[s..s + seq + 1]
        })
        .collect();
    Batch::from_windows(&windows)
}

/// Consecutive windows from the start of the eval stream, stepping by `seq`.
pub fn eval_batches(stream: &[usize], batch_size: usize, seq: usize, n_batches: usize) -> Result<Vec<Batch>> {
    let need = n_batches * batch_size * seq + 1;
    if stream.len() < need {
        return Err(LmError::InvalidInput(format!("eval stream has {} tokens, need {need}", stream.len())));
    }
    (0..n_batches)
        .map(|b| {
            let windows: Vec<&[usize]> = (0..batch_size)
                .map(|w| {
                    let s = (b * batch_size + w) * seq;
                    &stream[s..s + seq + 1]
                })
                .collect();
            Batch::from_windows(&windows)
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl<S: Scalar> Trainer<S> {
    pub fn new(plan: TrainPlan, model_config: ModelConfig) -> Result<Self> {
        plan.validate()?;
        if plan.seq_len > model_config.seq_len {
            return Err(LmError::InvalidConfig(format!(
                "plan seq_len {} exceeds model seq_len {}",
                plan.seq_len, model_config.seq_len
            )));
        }
        let model = Model::new(model_config, plan.router_settings(), plan.seed)?;
        Ok(Self::from_model(plan, model))
    }

    pub fn from_model(plan: TrainPlan, model: Model<S>) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|p| p.data.len()).collect();
        let opt = AdamW::new(&shapes, plan.adam);
        Self { plan, model, opt, step: 0 }
    }

    fn in_warmup(&self) -> bool {
        self.model.routers().iter().any(|r| match r {
            crate::model::RouterState::Threshold(t) => t.in_warmup(),
            _ => false,
        }) && self.model.config().routing_mode == RoutingMode::Et
    }

    /// Forward, backward, optimizer step and controller updates. On a
    /// non-finite loss or gradient the parameters are left untouched.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let step = self.step;
        let warm = self.in_warmup();
        let routers_before = self.model.routers().to_vec();
        let mut g = Graph::new();
        let fwd = match self.model.forward(&mut g, batch, &RoutingControl::Train, self.plan.aux_alpha) {
            Ok(f) => f,
            Err(e) => {
                self.model.routers_mut().clone_from_slice(&routers_before);
                return Err(e);
            }
        };
        let loss = g.scalar(fwd.loss).as_f64();
        let diverged = |detail: String| {
            LmError::NonFinite(format!("step {step}: {detail}"))
        };
        if !loss.is_finite() {
            self.model.routers_mut().clone_from_slice(&routers_before);
            return Err(diverged(format!("loss {loss}")));
        }
        g.backward(fwd.loss)?;
        let lrs: Vec<f64> = self.model.params().iter().map(|p| lr_at(&self.plan, p.group, step)).collect();
        let grads: Vec<Vec<S>> = fwd
            .params
            .iter()
            .zip(self.model.params())
            .map(|(v, p)| g.grad(*v).map(<[S]>::to_vec).unwrap_or_else(|| vec![S::zero(); p.data.len()]))
            .collect();
        let grads: Vec<&[S]> = grads.iter().map(Vec::as_slice).collect();
        let mut params: Vec<&mut [S]> = self.model.params_mut().iter_mut().map(|p| p.data.as_mut_slice()).collect();
        if let Err(e) = self.opt.step(&mut params, &grads, &lrs) {
            self.model.routers_mut().clone_from_slice(&routers_before);
            return Err(match e {
                LmError::NonFinite(d) => diverged(d),
                other => other,
            });
        }
        self.model.update_bias(&fwd.moe)?;
        self.step += 1;
        let ce = g.scalar(fwd.ce).as_f64();
        let aux = fwd.aux.map(|a| g.scalar(a).as_f64()).unwrap_or(0.0);
        Ok(self.record(step, Split::Train, ce, aux, &fwd.moe, warm))
    }

    fn record(&self, step: u64, split: Split, ce: f64, aux: f64, moe: &[MoeRecord], warm: bool) -> StepRecord {
        let layers = moe
            .iter()
            .zip(self.model.routers())
            .map(|(rec, state)| LayerLog {
                layer: rec.layer,
                usage: rec.stats.usage.clone(),
                cutoff: state.cutoffs().map(<[f64]>::to_vec),
                bias: state.bias().map(<[f64]>::to_vec),
            })
            .collect();
        StepRecord {
            step,
            split,
            ce_loss: ce,
            aux_loss: aux,
            lr: lr_at(&self.plan, ParamGroup::Matrix, step),
            saturation: mean(moe.iter().filter_map(|r| r.capacity.as_ref().map(|c| c.saturation_rate))),
            starvation: mean(moe.iter().filter_map(|r| r.capacity.as_ref().map(|c| c.starvation_rate))),
            in_warmup: warm,
            layers,
        }
    }

    /// Inference-mode pass over `batches`; no state changes.
    pub fn evaluate(&mut self, batches: &[Batch]) -> Result<(StepRecord, EvalResult)> {
        let moe_layers = self.model.config().moe_layers();
        let ge = self.model.config().n_routed_experts;
        let mut res = EvalResult {
            ce_loss: 0.0,
            token_losses: Vec::new(),
            positions: Vec::new(),
            tokens: Vec::new(),
            active: vec![Vec::new(); moe_layers.len()],
            moe_layers: moe_layers.clone(),
            usage: vec![vec![0.0; ge]; moe_layers.len()],
        };
        let mut last = Vec::new();
        for batch in batches {
            let mut g = Graph::new();
            let fwd = self.model.forward(&mut g, batch, &RoutingControl::Eval, 0.0)?;
            res.token_losses.extend(&fwd.token_losses);
            res.positions.extend((0..batch.n_tokens()).map(|t| batch.position(t)));
            res.tokens.extend(&batch.inputs);
            for (m, rec) in fwd.moe.iter().enumerate() {
                for t in 0..batch.n_tokens() {
                    res.active[m].push(rec.kept.experts_for(t).into_iter().map(|i| i as u32).collect());
                }
            }
            last = fwd.moe;
        }
        let n = res.token_losses.len() as f64;
        res.ce_loss = res.token_losses.iter().sum::<f64>() / n;
        for (m, layer) in res.active.iter().enumerate() {
            for set in layer {
                for &i in set {
                    res.usage[m][i as usize] += 1.0 / n;
                }
            }
        }
        let mut rec = self.record(self.step, Split::Eval, res.ce_loss, 0.0, &last, false);
        for (log, usage) in rec.layers.iter_mut().zip(&res.usage) {
            log.usage = usage.clone();
        }
        rec.saturation = None;
        rec.starvation = None;
        Ok((rec, res))
    }

    /// Runs the remaining steps, evaluating every `eval_every` steps and at
    /// the end. `observe` sees every record, with the eval result for eval
    /// rows.
    pub fn run(
        &mut self,
        train_stream: &[usize],
        eval_stream: &[usize],
        mut observe: impl FnMut(&StepRecord, Option<&EvalResult>) -> Result<()>,
    ) -> Result<EvalResult> {
        let p = self.plan.clone();
        let evals = eval_batches(eval_stream, p.batch_size, p.seq_len, p.eval_batches)?;
        while self.step < p.total_steps {
            let batch = sample_batch(train_stream, p.batch_size, p.seq_len, p.seed, self.step)?;
            let rec = self.train_step(&batch)?;
            observe(&rec, None)?;
            if self.step % p.eval_every == 0 && self.step < p.total_steps {
                let (rec, res) = self.evaluate(&evals)?;
                observe(&rec, Some(&res))?;
            }
            if self.step % 100 == 0 {
                log::info!("step {} ce {:.4}", self.step, rec.ce_loss);
            }
        }
        let (rec, res) = self.evaluate(&evals)?;
        observe(&rec, Some(&res))?;
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(total: u64) -> TrainPlan {
        TrainPlan::desk(total, &ModelConfig::default())
    }

    #[test]
    fn lr_endpoints() {
        let p = plan(3000);
        let w = p.lr.adamw_warmup_steps;
        assert_eq!(w, 39);
        assert_eq!(lr_at(&p, ParamGroup::Embedding, 0), 0.0);
        assert!((lr_at(&p, ParamGroup::Embedding, w) - p.lr.group_peak(ParamGroup::Embedding)).abs() < 1e-15);
        assert_eq!(lr_at(&p, ParamGroup::Matrix, 0), 3e-3);
        for g in [ParamGroup::Matrix, ParamGroup::Embedding, ParamGroup::Head] {
            let end = lr_at(&p, g, 3000);
            assert!((end - 0.1 * p.lr.group_peak(g)).abs() < 1e-15);
        }
        let mid = lr_at(&p, ParamGroup::Matrix, 1500);
        assert!((mid - 3e-3 * 0.55).abs() < 1e-15);
    }

    #[test]
    fn group_ratios() {
        let p = plan(100);
        let lam = (64.0f64 / 768.0).powf(-0.5);
        assert!((p.lr.group_peak(ParamGroup::Embedding) - 3e-3 * 10.0 * lam).abs() < 1e-15);
        assert!((p.lr.group_peak(ParamGroup::Head) - 3e-3 * 0.2 * lam).abs() < 1e-15);
    }

    #[test]
    fn adam_two_steps_by_hand() {
        let mut opt = AdamW::<f64>::new(&[1], AdamConfig::default());
        let mut x = vec![1.0];
        let lr = 0.1;
        opt.step(&mut [x.as_mut_slice()], &[&[0.5]], &[lr]).unwrap();
        // m1 = 0.05, v1 = 0.0125; mhat = 0.5, vhat = 0.25
        let x1 = 1.0 - lr * 0.5 / (0.5 + 1e-8);
        assert!((x[0] - x1).abs() < 1e-15);
        opt.step(&mut [x.as_mut_slice()], &[&[-1.0]], &[lr]).unwrap();
        let m2: f64 = 0.9 * 0.05 + 0.1 * -1.0;
        let v2: f64 = 0.95 * 0.0125 + 0.05 * 1.0;
        let mhat = m2 / (1.0 - 0.81);
        let vhat = v2 / (1.0 - 0.9025);
        let x2 = x1 - lr * mhat / (vhat.sqrt() + 1e-8);
        assert!((x[0] - x2).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_and_constant_gradients() {
        let mut opt = AdamW::<f64>::new(&[2], AdamConfig::default());
        let mut x = vec![1.0, -2.0];
        for _ in 0..5 {
            opt.step(&mut [x.as_mut_slice()], &[&[0.0, 0.0]], &[0.1]).unwrap();
        }
        assert_eq!(x, vec![1.0, -2.0]);
        let mut opt = AdamW::<f64>::new(&[1], AdamConfig::default());
        let mut x = vec![0.0];
        let mut prev = 0.0;
        for _ in 0..200 {
            opt.step(&mut [x.as_mut_slice()], &[&[3.0]], &[0.01]).unwrap();
            let delta = x[0] - prev;
            assert!(delta < 0.0 && delta.abs() <= 0.01 + 1e-12);
            prev = x[0];
        }
        assert!((x[0] + 2.0).abs() < 1e-6);
        assert!(matches!(
            opt.step(&mut [x.as_mut_slice()], &[&[f64::NAN]], &[0.01]),
            Err(LmError::NonFinite(_))
        ));
        let before = (x.clone(), opt.clone());
        assert!(matches!(
            opt.step(&mut [x.as_mut_slice()], &[&[1.0]], &[f64::INFINITY]),
            Err(LmError::NonFinite(_))
        ));
        assert_eq!((x, opt), before);
    }

    #[test]
    fn batches_are_step_deterministic() {
        let stream: Vec<usize> = (0..500).map(|i| i % 256).collect();
        let a = sample_batch(&stream, 4, 16, 7, 3).unwrap();
        let b = sample_batch(&stream, 4, 16, 7, 3).unwrap();
        let c = sample_batch(&stream, 4, 16, 7, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.targets[0], (a.inputs[0] + 1) % 256);
        let ev = eval_batches(&stream, 2, 16, 3).unwrap();
        assert_eq!(ev.len(), 3);
        assert_eq!(ev[1].inputs[0], 32);
        assert!(eval_batches(&stream, 8, 16, 4).is_err());
    }

    #[test]
    fn plan_validation() {
        let mut p = plan(10);
        assert!(p.validate().is_ok());
        p.lr.min_fraction = 0.0;
        assert!(p.validate().is_err());
        let mut p = plan(10);
        p.total_steps = 0;
        assert!(p.validate().is_err());
    }
}
