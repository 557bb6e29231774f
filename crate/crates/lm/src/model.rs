//! Micro transformer with shared-expert MoE feed-forward layers.
//!
//! Layout: embedding, RMSNorm, then pre-norm blocks of causal attention
//! (RoPE, QK-norm) and a feed-forward part, a final RMSNorm, an untied head
//! and a tanh logit softcap. The first block can stay dense; every other
//! block uses a shared expert plus `G*E` routed experts.

use std::fmt;
use std::str::FromStr;

use moelab_core::balance::{enforce_capacity, load_stats, BiasMode, BiasState, CapacityReport, LoadStats};
use moelab_core::routing::{ec_route, et_route, tc_route, Assignment, Pool, RoutingConfig, ScoreMatrix};
use moelab_core::threshold::ThresholdState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LmError, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    Dense,
    Tc,
    TcAux,
    TcLossfree,
    Ec,
    Et,
}

impl RoutingMode {
    pub const ALL: [RoutingMode; 6] = [
        RoutingMode::Dense,
        RoutingMode::Tc,
        RoutingMode::TcAux,
        RoutingMode::TcLossfree,
        RoutingMode::Ec,
        RoutingMode::Et,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RoutingMode::Dense => "dense",
            RoutingMode::Tc => "tc",
            RoutingMode::TcAux => "tc_aux",
            RoutingMode::TcLossfree => "tc_lossfree",
            RoutingMode::Ec => "ec",
            RoutingMode::Et => "et",
        }
    }

    pub fn is_routed(self) -> bool {
        self != RoutingMode::Dense
    }

    fn uses_threshold(self) -> bool {
        matches!(self, RoutingMode::Ec | RoutingMode::Et)
    }
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoutingMode {
    type Err = LmError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| LmError::InvalidConfig(format!("unknown routing mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// `G * E`
    pub n_routed_experts: usize,
    pub granularity: usize,
    pub expansion: usize,
    pub expert_dim: usize,
    pub routing_mode: RoutingMode,
    pub softcap: f64,
    pub first_layer_dense: bool,
    pub capacity_factor: f64,
    pub pool: Pool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            vocab_size: 256,
            seq_len: 128,
            n_routed_experts: 8,
            granularity: 1,
            expansion: 8,
            expert_dim: 128,
            routing_mode: RoutingMode::Et,
            softcap: 15.0,
            first_layer_dense: true,
            capacity_factor: 0.5,
            pool: Pool::Batch,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LmError::InvalidConfig(m));
        if [self.n_layers, self.d_model, self.n_heads, self.vocab_size, self.seq_len, self.expert_dim]
            .contains(&0)
        {
            return bad("layer, width, head, vocab, sequence and expert sizes must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return bad("head dimension must be even for rotary embeddings".into());
        }
        if self.granularity == 0 || self.expansion == 0 || self.n_routed_experts != self.granularity * self.expansion {
            return bad(format!(
                "n_routed_experts {} != granularity {} * expansion {}",
                self.n_routed_experts, self.granularity, self.expansion
            ));
        }
        if !(self.softcap > 0.0) {
            return bad(format!("softcap {} must be positive", self.softcap));
        }
        if !(0.0..1.0).contains(&self.capacity_factor) {
            return bad(format!("capacity_factor {} outside [0, 1)", self.capacity_factor));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Hidden width of a dense feed-forward block; matches the active width
    /// of a routed block (shared expert plus `G` routed experts).
    pub fn dense_hidden(&self) -> usize {
        self.expert_dim * (1 + self.granularity)
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.routing_mode.is_routed() && !(layer == 0 && self.first_layer_dense)
    }

    pub fn moe_layers(&self) -> Vec<usize> {
        (0..self.n_layers).filter(|&l| self.is_moe_layer(l)).collect()
    }

    pub fn routing_config(&self) -> Result<RoutingConfig> {
        Ok(RoutingConfig::new(self.granularity, self.expansion, self.capacity_factor, self.pool)?)
    }
}

/// Controller settings for the routed layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterSettings {
    pub bias_rate: f64,
    pub bias_mode: BiasMode,
    pub et_beta: f64,
    pub et_warmup_steps: u64,
}

impl Default for RouterSettings {
    fn default() -> Self {
        Self {
            bias_rate: 0.005,
            bias_mode: BiasMode::Sign,
            et_beta: 0.99,
            et_warmup_steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterState {
    Stateless,
    Bias(BiasState),
    Threshold(ThresholdState),
}

impl RouterState {
    pub fn cutoffs(&self) -> Option<&[f64]> {
        match self {
            RouterState::Threshold(s) => Some(&s.cutoffs),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&[f64]> {
        match self {
            RouterState::Bias(b) => Some(&b.bias),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Head,
    Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub group: ParamGroup,
}

#[derive(Debug, Clone)]
enum Ffn {
    Dense { up: usize, down: usize },
    Moe { router: usize, shared_up: usize, shared_down: usize, experts: Vec<(usize, usize)> },
}

#[derive(Debug, Clone)]
struct Block {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    ffn: Ffn,
}

/// Token windows flattened as `[batch_size * seq]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch_size: usize,
    pub seq: usize,
}

impl Batch {
    /// Each window holds `seq + 1` tokens: inputs are the first `seq`,
    /// targets the last `seq`.
    pub fn from_windows(windows: &[&[usize]]) -> Result<Self> {
        let len = windows.first().map(|w| w.len()).unwrap_or(0);
        if len < 2 || windows.iter().any(|w| w.len() != len) {
            return Err(LmError::InvalidInput("windows must share a length of at least 2".into()));
        }
        let seq = len - 1;
        let mut inputs = Vec::with_capacity(windows.len() * seq);
        let mut targets = Vec::with_capacity(windows.len() * seq);
        for w in windows {
            inputs.extend_from_slice(&w[..seq]);
            targets.extend_from_slice(&w[1..]);
        }
        Ok(Self { inputs, targets, batch_size: windows.len(), seq })
    }

    pub fn n_tokens(&self) -> usize {
        self.inputs.len()
    }

    pub fn position(&self, token: usize) -> usize {
        token % self.seq
    }
}

/// Routing outcome of one MoE layer for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeRecord {
    pub layer: usize,
    /// Selections before capacity enforcement.
    pub raw: Assignment,
    /// Selections that were actually computed.
    pub kept: Assignment,
    pub stats: LoadStats,
    pub capacity: Option<CapacityReport>,
}

/// How routed layers make their selections.
#[derive(Debug, Clone)]
pub enum RoutingControl {
    /// Training routing: controller state advances and capacity is enforced.
    Train,
    /// Inference routing: causal, no capacity, state untouched.
    Eval,
    /// Replays the selections of an earlier pass, one record per MoE layer.
    Frozen(Vec<MoeRecord>),
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// `ce + aux`
    pub loss: Var,
    pub ce: Var,
    pub aux: Option<Var>,
    pub logits: Var,
    /// One graph leaf per model parameter, in parameter order.
    pub params: Vec<Var>,
    pub token_losses: Vec<f64>,
    pub moe: Vec<MoeRecord>,
}

#[derive(Debug, Clone)]
pub struct Model<S> {
    config: ModelConfig,
    params: Vec<Param<S>>,
    blocks: Vec<Block>,
    embed: usize,
    head: usize,
    routers: Vec<RouterState>,
}

/// `(1/sqrt(d_in)) * min(1, sqrt(d_out/d_in))`
pub fn aspect_std(d_in: usize, d_out: usize) -> f64 {
    let (i, o) = (d_in as f64, d_out as f64);
    (1.0 / i.sqrt()) * (o / i).sqrt().min(1.0)
}

enum Init {
    Normal(f64),
    Zero,
}

struct Builder<'a, S> {
    params: Vec<Param<S>>,
    rng: &'a mut ChaCha8Rng,
}

impl<S: Scalar> Builder<'_, S> {
    fn add(&mut self, name: String, shape: [usize; 2], init: Init, group: ParamGroup) -> usize {
        let n = shape[0] * shape[1];
        let data = match init {
            Init::Zero => vec![S::zero(); n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| S::lit(dist.sample(self.rng))).collect()
            }
        };
        self.params.push(Param { name, shape: shape.to_vec(), data, group });
        self.params.len() - 1
    }

    fn linear(&mut self, name: String, d_in: usize, d_out: usize, zero: bool) -> usize {
        let init = if zero { Init::Zero } else { Init::Normal(aspect_std(d_in, d_out)) };
        self.add(name, [d_in, d_out], init, ParamGroup::Matrix)
    }
}

impl<S: Scalar> Model<S> {
    /// Deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, settings: RouterSettings, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v) = (config.d_model, config.vocab_size);
        let mut b = Builder { params: Vec::new(), rng: &mut rng };
        let embed = b.add("embed".into(), [v, d], Init::Normal(1.0), ParamGroup::Embedding);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let q = b.linear(format!("l{l}.attn.q"), d, d, false);
            let k = b.linear(format!("l{l}.attn.k"), d, d, false);
            let v = b.linear(format!("l{l}.attn.v"), d, d, false);
            let o = b.linear(format!("l{l}.attn.o"), d, d, true);
            let ffn = if config.is_moe_layer(l) {
                let ge = config.n_routed_experts;
                let router = b.add(format!("l{l}.router"), [d, ge], Init::Normal(1.0 / (d as f64).sqrt()), ParamGroup::Matrix);
                let shared_up = b.linear(format!("l{l}.shared.up"), d, config.expert_dim, false);
                let shared_down = b.linear(format!("l{l}.shared.down"), config.expert_dim, d, true);
                let experts = (0..ge)
                    .map(|i| {
                        let up = b.linear(format!("l{l}.expert{i}.up"), d, config.expert_dim, false);
                        let down = b.linear(format!("l{l}.expert{i}.down"), config.expert_dim, d, true);
                        (up, down)
                    })
                    .collect();
                Ffn::Moe { router, shared_up, shared_down, experts }
            } else {
                let h = config.dense_hidden();
                Ffn::Dense {
                    up: b.linear(format!("l{l}.mlp.up"), d, h, false),
                    down: b.linear(format!("l{l}.mlp.down"), h, d, true),
                }
            };
            blocks.push(Block { q, k, v, o, ffn });
        }
        let head = b.add("head".into(), [d, v], Init::Zero, ParamGroup::Head);
        let params = b.params;
        let routers = Self::fresh_routers(&config, settings)?;
        Ok(Self { config, params, blocks, embed, head, routers })
    }

    fn fresh_routers(config: &ModelConfig, s: RouterSettings) -> Result<Vec<RouterState>> {
        let ge = config.n_routed_experts;
        config
            .moe_layers()
            .iter()
            .map(|_| {
                Ok(match config.routing_mode {
                    RoutingMode::TcLossfree => RouterState::Bias(BiasState::new(ge, s.bias_rate, s.bias_mode)?),
                    // Expert choice trains with top-k throughout; its EMA only
                    // serves causal evaluation.
                    RoutingMode::Ec => RouterState::Threshold(ThresholdState::new(ge, s.et_beta, u64::MAX)?),
                    RoutingMode::Et => RouterState::Threshold(ThresholdState::new(ge, s.et_beta, s.et_warmup_steps)?),
                    _ => RouterState::Stateless,
                })
            })
            .collect()
    }

    /// Rebuilds a model from stored parameters and router states. Parameter
    /// names and shapes must match a freshly built model of `config`.
    pub fn from_parts(config: ModelConfig, params: Vec<Param<S>>, routers: Vec<RouterState>) -> Result<Self> {
        let mut model = Self::new(config, RouterSettings::default(), 0)?;
        if params.len() != model.params.len() {
            return Err(LmError::InvalidInput(format!("expected {} parameters, got {}", model.params.len(), params.len())));
        }
        for (want, got) in model.params.iter().zip(&params) {
            if want.name != got.name || want.shape != got.shape || got.data.len() != want.data.len() || want.group != got.group {
                return Err(LmError::InvalidInput(format!("parameter {} does not match {}", got.name, want.name)));
            }
        }
        if routers.len() != model.routers.len() {
            return Err(LmError::InvalidInput(format!("expected {} router states, got {}", model.routers.len(), routers.len())));
        }
        model.params = params;
        model.routers = routers;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Parameters touched per token: routed experts count `G` times.
    pub fn active_param_count(&self) -> usize {
        let per_expert = 2 * self.config.d_model * self.config.expert_dim;
        let inactive = (self.config.n_routed_experts - self.config.granularity) * per_expert;
        self.param_count() - self.config.moe_layers().len() * inactive
    }

    /// Router state of each MoE layer, in layer order.
    pub fn routers(&self) -> &[RouterState] {
        &self.routers
    }

    pub fn routers_mut(&mut self) -> &mut [RouterState] {
        &mut self.routers
    }

    /// Advances loss-free bias controllers from the given training records.
    pub fn update_bias(&mut self, records: &[MoeRecord]) -> Result<()> {
        for (state, rec) in self.routers.iter_mut().zip(records) {
            if let RouterState::Bias(b) = state {
                b.update(&rec.stats)?;
            }
        }
        Ok(())
    }

    pub fn forward(&mut self, g: &mut Graph<S>, batch: &Batch, control: &RoutingControl, aux_alpha: f64) -> Result<Forward> {
        let cfg = self.config.clone();
        let (n, seq) = (batch.n_tokens(), batch.seq);
        if n == 0 || seq > cfg.seq_len || batch.targets.len() != n || n != batch.batch_size * seq {
            return Err(LmError::InvalidInput(format!(
                "batch of {} tokens in windows of {seq} (max {})",
                batch.n_tokens(),
                cfg.seq_len
            )));
        }
        if let RoutingControl::Frozen(recs) = control {
            if recs.len() != self.routers.len() {
                return Err(LmError::InvalidInput(format!("{} frozen records for {} MoE layers", recs.len(), self.routers.len())));
            }
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(Tensor { shape: p.shape.clone(), data: p.data.clone() }))
            .collect();
        let (d, heads, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());

        let x = g.embedding(params[self.embed], &batch.inputs)?;
        let mut x = g.rmsnorm(x, d)?;
        let mut moe = Vec::new();
        let mut aux_terms = Vec::new();
        for (l, block) in self.blocks.clone().iter().enumerate() {
            let h = g.rmsnorm(x, d)?;
            let q = g.matmul(h, params[block.q])?;
            let k = g.matmul(h, params[block.k])?;
            let v = g.matmul(h, params[block.v])?;
            let q = g.rope(q, seq, heads)?;
            let k = g.rope(k, seq, heads)?;
            let q = g.rmsnorm(q, hd)?;
            let k = g.rmsnorm(k, hd)?;
            let a = g.causal_attention(q, k, v, seq, heads)?;
            let a = g.matmul(a, params[block.o])?;
            x = g.add(x, a)?;

            let h = g.rmsnorm(x, d)?;
            let f = match &block.ffn {
                Ffn::Dense { up, down } => mlp(g, h, params[*up], params[*down])?,
                Ffn::Moe { router, shared_up, shared_down, experts } => {
                    let idx = moe.len();
                    let w = MoeWeights {
                        router: params[*router],
                        shared_up: params[*shared_up],
                        shared_down: params[*shared_down],
                        experts: experts.iter().map(|&(u, dn)| (params[u], params[dn])).collect(),
                    };
                    let (out, rec, aux) = self.moe_forward(g, h, &w, idx, l, batch, control, aux_alpha)?;
                    moe.push(rec);
                    aux_terms.extend(aux);
                    out
                }
            };
            x = g.add(x, f)?;
        }
        let x = g.rmsnorm(x, d)?;
        let logits = g.matmul(x, params[self.head])?;
        let logits = g.softcap(logits, cfg.softcap)?;
        let per_token = g.cross_entropy(logits, &batch.targets)?;
        let token_losses = g.value(per_token).to_f64();
        let ce = g.mean(per_token)?;
        let (loss, aux) = if aux_terms.is_empty() {
            (ce, None)
        } else {
            let mut total = aux_terms[0];
            for &t in &aux_terms[1..] {
                total = g.add(total, t)?;
            }
            (g.add(ce, total)?, Some(total))
        };
        Ok(Forward { loss, ce, aux, logits, params, token_losses, moe })
    }

    #[allow(clippy::too_many_arguments)]
    fn moe_forward(
        &mut self,
        g: &mut Graph<S>,
        h: Var,
        w: &MoeWeights,
        idx: usize,
        layer: usize,
        batch: &Batch,
        control: &RoutingControl,
        aux_alpha: f64,
    ) -> Result<(Var, MoeRecord, Option<Var>)> {
        let cfg = &self.config;
        let (ge, e) = (cfg.n_routed_experts, cfg.expansion);
        let n = batch.n_tokens();
        let scores = g.matmul(h, w.router)?;
        let raw_scores = g.value(scores).to_f64();
        if raw_scores.iter().any(|x| !x.is_finite()) {
            return Err(LmError::NonFinite(format!("router scores of layer {layer}")));
        }
        let sm = ScoreMatrix::new(n, ge, raw_scores)?;
        let rcfg = cfg.routing_config()?;
        let pools: Vec<(usize, usize)> = match cfg.pool {
            Pool::Sequence => (0..batch.batch_size).map(|b| (b * batch.seq, (b + 1) * batch.seq)).collect(),
            Pool::Batch | Pool::Population => vec![(0, n)],
        };

        let (raw, kept, capacity) = match control {
            RoutingControl::Frozen(recs) => {
                let r = &recs[idx];
                if r.kept.n_tokens() != n || r.kept.n_experts() != ge {
                    return Err(LmError::InvalidInput("frozen record does not match batch".into()));
                }
                (r.raw.clone(), r.kept.clone(), r.capacity.clone())
            }
            RoutingControl::Eval => {
                let a = route_eval(&self.routers[idx], cfg.routing_mode, &sm, cfg.granularity)?;
                (a.clone(), a, None)
            }
            RoutingControl::Train => {
                let raw = route_train(&mut self.routers[idx], cfg.routing_mode, &sm, &rcfg, &pools)?;
                let report = capacity_over_pools(&raw, &sm, &pools, e, cfg.capacity_factor)?;
                (raw, report.kept.clone(), Some(report))
            }
        };
        let stats = load_stats(&raw, e)?;

        let gates = g.sigmoid(scores)?;
        let mut out = mlp(g, h, w.shared_up, w.shared_down)?;
        for (i, &(up, down)) in w.experts.iter().enumerate() {
            let rows = kept.tokens_for(i);
            if rows.is_empty() {
                continue;
            }
            let xi = g.gather_rows(h, &rows)?;
            let yi = mlp(g, xi, up, down)?;
            let pairs: Vec<(usize, usize)> = rows.iter().map(|&t| (t, i)).collect();
            let gi = g.gather_elems(gates, &pairs)?;
            let yi = g.scale_rows(yi, gi)?;
            out = g.index_add_rows(out, yi, &rows)?;
        }

        let aux = if cfg.routing_mode == RoutingMode::TcAux && !matches!(control, RoutingControl::Eval) {
            // alpha * sum_i f_i * mean_t p[t,i], with f held constant.
            let mut wts = Vec::with_capacity(n * ge);
            for _ in 0..n {
                wts.extend(stats.load.iter().map(|f| S::lit(aux_alpha * f / n as f64)));
            }
            let c = g.constant(Tensor { shape: vec![n, ge], data: wts });
            let m = g.mul(gates, c)?;
            Some(g.sum(m)?)
        } else {
            None
        };
        Ok((out, MoeRecord { layer, raw, kept, stats, capacity }, aux))
    }
}

struct MoeWeights {
    router: Var,
    shared_up: Var,
    shared_down: Var,
    experts: Vec<(Var, Var)>,
}

fn mlp<S: Scalar>(g: &mut Graph<S>, x: Var, up: Var, down: Var) -> Result<Var> {
    let u = g.matmul(x, up)?;
    let a = g.relu2(u)?;
    g.matmul(a, down)
}

fn route_eval(state: &RouterState, mode: RoutingMode, scores: &ScoreMatrix, granularity: usize) -> Result<Assignment> {
    Ok(match (mode, state) {
        (RoutingMode::TcLossfree, RouterState::Bias(b)) => tc_route(scores, granularity, Some(&b.bias))?,
        (_, RouterState::Threshold(t)) => t.route_inference(scores)?,
        _ => tc_route(scores, granularity, None)?,
    })
}

fn route_train(
    state: &mut RouterState,
    mode: RoutingMode,
    scores: &ScoreMatrix,
    rcfg: &RoutingConfig,
    pools: &[(usize, usize)],
) -> Result<Assignment> {
    match state {
        RouterState::Bias(b) => Ok(tc_route(scores, rcfg.granularity, Some(&b.bias))?),
        RouterState::Threshold(t) if mode.uses_threshold() => {
            if pools.len() == 1 {
                return Ok(t.route_with_schedule(scores, rcfg, true)?);
            }
            let e = rcfg.expansion;
            // Per-pool expert choice during warmup; the EMA always tracks the
            // whole batch so that one optimizer step is one EMA step.
            if t.in_warmup() {
                let parts = pools
                    .iter()
                    .map(|&(s, end)| ec_route(&scores.slice_rows(s, end), e))
                    .collect::<moelab_core::Result<Vec<_>>>()?;
                t.ema_update(scores, e)?;
                return Ok(Assignment::concat(&parts)?);
            }
            if !t.initialized {
                t.ema_update(scores, e)?;
                return Ok(et_route(scores, &t.cutoffs)?);
            }
            let a = et_route(scores, &t.cutoffs)?;
            t.ema_update(scores, e)?;
            Ok(a)
        }
        _ => Ok(tc_route(scores, rcfg.granularity, None)?),
    }
}

fn capacity_over_pools(
    raw: &Assignment,
    scores: &ScoreMatrix,
    pools: &[(usize, usize)],
    expansion: usize,
    capacity_factor: f64,
) -> Result<CapacityReport> {
    if pools.len() == 1 {
        return Ok(enforce_capacity(raw, scores, expansion, capacity_factor)?);
    }
    let ge = raw.n_experts();
    let mut reports = Vec::with_capacity(pools.len());
    for &(s, e) in pools {
        let sub = scores.slice_rows(s, e);
        let mask: Vec<bool> = raw.mask()[s * ge..e * ge].to_vec();
        let part = Assignment::from_mask(&sub, mask)?;
        reports.push(enforce_capacity(&part, &sub, expansion, capacity_factor)?);
    }
    let kept = Assignment::concat(&reports.iter().map(|r| r.kept.clone()).collect::<Vec<_>>())?;
    let sum_counts = |f: fn(&CapacityReport) -> &Vec<usize>| {
        (0..ge).map(|i| reports.iter().map(|r| f(r)[i]).sum()).collect::<Vec<usize>>()
    };
    let dropped_counts = sum_counts(|r| &r.dropped_counts);
    let selected = raw.total_selected();
    let dropped: usize = dropped_counts.iter().sum();
    Ok(CapacityReport {
        kept,
        saturation_rate: if selected == 0 { 0.0 } else { dropped as f64 / selected as f64 },
        starvation_rate: reports.iter().map(|r| r.starvation_rate).sum::<f64>() / reports.len() as f64,
        kept_counts: sum_counts(|r| &r.kept_counts),
        dropped_counts,
    })
}
