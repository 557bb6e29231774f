//! Synthetic Gaussian-logit streams pushed through the routing kernels.

use moelab_core::balance::{load_stats, BiasMode, BiasState};
use moelab_core::routing::{ec_route, tc_route, Pool, RoutingConfig, ScoreMatrix};
use moelab_core::threshold::{kth_largest, ThresholdState};
use moelab_core::routing::ec_capacity;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    Tc,
    TcLossfree,
    Ec,
    Et,
}

impl std::str::FromStr for SimMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tc" => Ok(SimMode::Tc),
            "tc_lossfree" => Ok(SimMode::TcLossfree),
            "ec" => Ok(SimMode::Ec),
            "et" => Ok(SimMode::Et),
            _ => Err(invalid(format!("unknown simulation mode {s:?} (tc, tc_lossfree, ec, et)"))),
        }
    }
}

impl SimMode {
    pub fn name(self) -> &'static str {
        match self {
            SimMode::Tc => "tc",
            SimMode::TcLossfree => "tc_lossfree",
            SimMode::Ec => "ec",
            SimMode::Et => "et",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub mode: SimMode,
    pub granularity: usize,
    pub expansion: usize,
    /// Tokens per routing pool.
    pub batch_tokens: usize,
    pub steps: u64,
    pub beta: f64,
    pub warmup_steps: u64,
    pub bias_rate: f64,
    /// Standard deviation of fixed per-expert logit offsets.
    pub expert_shift: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mode: SimMode::Et,
            granularity: 1,
            expansion: 8,
            batch_tokens: 1024,
            steps: 2000,
            beta: 0.99,
            warmup_steps: 0,
            bias_rate: 0.005,
            expert_shift: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn n_experts(&self) -> usize {
        self.granularity * self.expansion
    }
}

pub fn gaussian_scores(rng: &mut ChaCha8Rng, n_tokens: usize, n_experts: usize, offsets: &[f64]) -> ScoreMatrix {
    let data = (0..n_tokens * n_experts)
        .map(|j| {
            let z: f64 = StandardNormal.sample(rng);
            z + offsets.get(j % n_experts).copied().unwrap_or(0.0)
        })
        .collect();
    ScoreMatrix::new(n_tokens, n_experts, data).expect("finite gaussian scores")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimStep {
    pub step: u64,
    pub usage: Vec<f64>,
    /// EMA cutoffs (et), per-pool kth score (ec) or selection bias
    /// (tc_lossfree); empty for tc.
    pub cutoff: Vec<f64>,
}

impl SimStep {
    pub fn mean_usage(&self) -> f64 {
        self.usage.iter().sum::<f64>() / self.usage.len() as f64
    }
}

pub const SIM_LEAD: [&str; 3] = ["step", "mode", "mean_usage"];

pub fn sim_header(n_experts: usize) -> Vec<String> {
    let mut h: Vec<String> = SIM_LEAD.iter().map(|s| s.to_string()).collect();
    h.extend((0..n_experts).map(|e| format!("usage_e{e}")));
    h.extend((0..n_experts).map(|e| format!("cutoff_e{e}")));
    h
}

pub fn sim_row(mode: SimMode, s: &SimStep) -> Vec<String> {
    let mut row = vec![s.step.to_string(), mode.name().to_string(), s.mean_usage().to_string()];
    row.extend(s.usage.iter().map(f64::to_string));
    let n = s.usage.len();
    row.extend((0..n).map(|e| s.cutoff.get(e).map(f64::to_string).unwrap_or_default()));
    row
}

pub fn simulate(cfg: &SimConfig) -> Result<Vec<SimStep>> {
    let ge = cfg.n_experts();
    let rc = RoutingConfig::new(cfg.granularity, cfg.expansion, 0.0, Pool::Batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let offsets: Vec<f64> = (0..ge)
        .map(|_| cfg.expert_shift * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    let mut threshold = ThresholdState::new(ge, cfg.beta, cfg.warmup_steps)?;
    let mut bias = BiasState::new(ge, cfg.bias_rate, BiasMode::Sign)?;
    let mut out = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let scores = gaussian_scores(&mut rng, cfg.batch_tokens, ge, &offsets);
        let (a, cutoff) = match cfg.mode {
            SimMode::Tc => (tc_route(&scores, cfg.granularity, None)?, Vec::new()),
            SimMode::TcLossfree => {
                let a = tc_route(&scores, cfg.granularity, Some(&bias.bias))?;
                bias.update(&load_stats(&a, cfg.expansion)?)?;
                (a, bias.bias.clone())
            }
            SimMode::Ec => {
                let k = ec_capacity(scores.n_tokens(), cfg.expansion)?;
                let kth = (0..ge).map(|i| kth_largest(&scores.column(i), k)).collect::<std::result::Result<_, _>>()?;
                (ec_route(&scores, cfg.expansion)?, kth)
            }
            SimMode::Et => {
                let a = threshold.route_with_schedule(&scores, &rc, true)?;
                (a, threshold.cutoffs.clone())
            }
        };
        let stats = load_stats(&a, cfg.expansion)?;
        out.push(SimStep { step, usage: stats.usage, cutoff });
    }
    Ok(out)
}

/// Runs `updates` EMA steps of an ET router on standard-Gaussian pools
/// and returns the state.
pub fn ema_run(expansion: usize, beta: f64, batch: usize, updates: u64, seed: u64) -> Result<ThresholdState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ThresholdState::new(expansion, beta, 0)?;
    for _ in 0..updates {
        let s = gaussian_scores(&mut rng, batch, expansion, &[]);
        state.ema_update(&s, expansion)?;
    }
    Ok(state)
}

/// Standard deviation across `trials` pools of the EC per-pool cutoff
/// (the `N/E`-th largest of `N` standard-Gaussian scores).
pub fn ec_cutoff_std(n_tokens: usize, expansion: usize, trials: usize, seed: u64) -> Result<f64> {
    if trials < 2 {
        return Err(invalid("need at least two trials"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = ec_capacity(n_tokens, expansion)?;
    let xs: Vec<f64> = (0..trials)
        .map(|_| {
            let col: Vec<f64> = (0..n_tokens).map(|_| StandardNormal.sample(&mut rng)).collect();
            kth_largest(&col, k)
        })
        .collect::<std::result::Result<_, _>>()?;
    let m = xs.iter().sum::<f64>() / trials as f64;
    Ok((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tc_usage_is_exactly_g_over_ge() {
        let cfg = SimConfig { mode: SimMode::Tc, steps: 5, batch_tokens: 64, granularity: 2, expansion: 4, ..SimConfig::default() };
        for s in simulate(&cfg).unwrap() {
            assert!((s.mean_usage() - 0.25).abs() < 1e-12);
            assert!(s.cutoff.is_empty());
        }
    }

    #[test]
    fn ec_usage_is_exact() {
        let cfg = SimConfig { mode: SimMode::Ec, steps: 3, batch_tokens: 80, ..SimConfig::default() };
        for s in simulate(&cfg).unwrap() {
            assert!(s.usage.iter().all(|&u| (u - 10.0 / 80.0).abs() < 1e-12));
        }
    }

    #[test]
    fn et_mean_usage_near_one_over_e() {
        let cfg = SimConfig { steps: 300, batch_tokens: 512, ..SimConfig::default() };
        let steps = simulate(&cfg).unwrap();
        let tail: f64 = steps[200..].iter().map(SimStep::mean_usage).sum::<f64>() / 100.0;
        assert!((tail - 0.125).abs() < 0.0125, "{tail}");
    }

    #[test]
    fn lossfree_bias_rebalances_shifted_experts() {
        let cfg = SimConfig { mode: SimMode::TcLossfree, steps: 1500, batch_tokens: 256, expert_shift: 0.5, bias_rate: 0.01, seed: 3, ..SimConfig::default() };
        let steps = simulate(&cfg).unwrap();
        let first = &steps[0].usage;
        let last = &steps.last().unwrap().usage;
        let spread = |u: &[f64]| u.iter().cloned().fold(0.0, f64::max) - u.iter().cloned().fold(1.0, f64::min);
        assert!(spread(last) < spread(first), "{first:?} -> {last:?}");
    }

    #[test]
    fn sim_rows_match_header() {
        let cfg = SimConfig { steps: 2, batch_tokens: 16, ..SimConfig::default() };
        let h = sim_header(8);
        for s in simulate(&cfg).unwrap() {
            assert_eq!(sim_row(cfg.mode, &s).len(), h.len());
        }
    }

    #[test]
    fn mode_names_parse() {
        for m in [SimMode::Tc, SimMode::TcLossfree, SimMode::Ec, SimMode::Et] {
            assert_eq!(m.name().parse::<SimMode>().unwrap(), m);
        }
        assert!("dense".parse::<SimMode>().is_err());
    }
}
