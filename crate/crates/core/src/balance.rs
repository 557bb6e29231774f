//! Load statistics, the auxiliary balance loss, loss-free bias controllers
//! and capacity enforcement.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::routing::{ec_capacity, Assignment, ScoreMatrix};

/// Per-expert load statistics of one routing pool.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadStats {
    /// Normalized load `f_i = (E/N) * sum_t z[t,i]`; 1 under perfect balance.
    pub load: Vec<f64>,
    /// Mean routing probability `P_i = (1/N) * sum_t p[t,i]`.
    pub mean_prob: Vec<f64>,
    /// Fraction of tokens selecting each expert.
    pub usage: Vec<f64>,
}

pub fn load_stats(assignment: &Assignment, expansion: usize) -> Result<LoadStats> {
    let n = assignment.n_tokens();
    if n == 0 {
        return Err(Error::EmptyPool);
    }
    let ge = assignment.n_experts();
    let mut counts = vec![0usize; ge];
    let mut prob = vec![0.0; ge];
    for t in 0..n {
        for i in 0..ge {
            counts[i] += usize::from(assignment.is_selected(t, i));
            prob[i] += assignment.gate(t, i);
        }
    }
    let nf = n as f64;
    let usage: Vec<f64> = counts.iter().map(|&c| c as f64 / nf).collect();
    Ok(LoadStats {
        load: usage.iter().map(|u| expansion as f64 * u).collect(),
        mean_prob: prob.iter().map(|p| p / nf).collect(),
        usage,
    })
}

/// `alpha * sum_i f_i * P_i`.
pub fn aux_loss(stats: &LoadStats, alpha: f64) -> f64 {
    alpha * stats.load.iter().zip(&stats.mean_prob).map(|(f, p)| f * p).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// `b_i += u * sign(1 - f_i)`
    Sign,
    /// `b_i += u * (1 - f_i)`
    Proportional,
}

/// Per-expert selection bias for loss-free balancing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasState {
    pub bias: Vec<f64>,
    pub rate: f64,
    pub mode: BiasMode,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl BiasState {
    pub fn new(n_experts: usize, rate: f64, mode: BiasMode) -> Result<Self> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(invalid("bias update rate must be finite and > 0"));
        }
        Ok(Self {
            bias: vec![0.0; n_experts],
            rate,
            mode,
        })
    }

    /// Returns the state after one controller step on `stats`.
    pub fn updated(&self, stats: &LoadStats) -> Result<BiasState> {
        if stats.load.len() != self.bias.len() {
            return Err(invalid(format!(
                "load has {} experts, bias has {}",
                stats.load.len(),
                self.bias.len()
            )));
        }
        let bias = self
            .bias
            .iter()
            .zip(&stats.load)
            .map(|(&b, &f)| match self.mode {
                BiasMode::Sign => b + self.rate * sign(1.0 - f),
                BiasMode::Proportional => b + self.rate * (1.0 - f),
            })
            .collect();
        Ok(BiasState {
            bias,
            rate: self.rate,
            mode: self.mode,
        })
    }

    pub fn update(&mut self, stats: &LoadStats) -> Result<()> {
        *self = self.updated(stats)?;
        Ok(())
    }
}

/// Result of clipping per-expert loads to the capacity band.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacityReport {
    pub kept: Assignment,
    /// Dropped selections over all original selections.
    pub saturation_rate: f64,
    /// Mean over experts of `max(0, floor - count) / floor`.
    pub starvation_rate: f64,
    pub kept_counts: Vec<usize>,
    pub dropped_counts: Vec<usize>,
}

/// Largest per-expert count allowed: `floor((1 + C) * k)`.
pub fn capacity_ceiling(k: usize, capacity_factor: f64) -> usize {
    ((1.0 + capacity_factor) * k as f64 + 1e-9).floor() as usize
}

/// Drops the lowest-scored selections of any expert above `(1 + C) * k`,
/// `k = floor(N/E)`, and reports saturation against the ceiling and
/// starvation against the `(1 - C) * k` floor. Never adds selections.
pub fn enforce_capacity(
    assignment: &Assignment,
    scores: &ScoreMatrix,
    expansion: usize,
    capacity_factor: f64,
) -> Result<CapacityReport> {
    if !(capacity_factor >= 0.0) {
        return Err(invalid("capacity factor must be >= 0"));
    }
    if scores.n_tokens() != assignment.n_tokens() || scores.n_experts() != assignment.n_experts() {
        return Err(invalid("scores and assignment shapes differ"));
    }
    let k = ec_capacity(assignment.n_tokens(), expansion)?;
    let ceiling = capacity_ceiling(k, capacity_factor);
    let floor = (1.0 - capacity_factor) * k as f64;
    let ge = assignment.n_experts();

    let mut kept = assignment.clone();
    let mut kept_counts = Vec::with_capacity(ge);
    let mut dropped_counts = Vec::with_capacity(ge);
    for i in 0..ge {
        let mut tokens = assignment.tokens_for(i);
        let mut dropped = 0;
        if tokens.len() > ceiling {
            // Highest score first; earlier token wins ties.
            tokens.sort_by(|&a, &b| scores.get(b, i).partial_cmp(&scores.get(a, i)).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
            for &t in &tokens[ceiling..] {
                kept.set(t, i, false);
                dropped += 1;
            }
        }
        kept_counts.push(tokens.len() - dropped);
        dropped_counts.push(dropped);
    }

    let selected = assignment.total_selected();
    let dropped: usize = dropped_counts.iter().sum();
    let saturation_rate = if selected == 0 {
        0.0
    } else {
        dropped as f64 / selected as f64
    };
    let starvation_rate = if floor <= 0.0 || ge == 0 {
        0.0
    } else {
        kept_counts
            .iter()
            .map(|&c| ((floor - c as f64).max(0.0)) / floor)
            .sum::<f64>()
            / ge as f64
    };
    Ok(CapacityReport {
        kept,
        saturation_rate,
        starvation_rate,
        kept_counts,
        dropped_counts,
    })
}
