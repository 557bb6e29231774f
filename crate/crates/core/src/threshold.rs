//! Cutoff-EMA tracking of the per-expert `(1 - 1/E)` score quantile and the
//! EC-to-ET warmup schedule.
//!
//! Each training call ranks the pool's column `i`, takes its `k`-th largest
//! score (`k = floor(N/E)`) and folds it into `c_i <- beta*c_i + (1-beta)*kth`.
//! Routing before `warmup_steps` uses expert choice over the pool; afterwards
//! tokens are admitted by `score > c_i`. Inference never touches the state.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::routing::{ec_capacity, ec_route, et_route, Assignment, RoutingConfig, ScoreMatrix};

/// Warmup length used for the reference configuration.
pub const REFERENCE_WARMUP_STEPS: u64 = 4000;
/// Optimizer steps of the reference run (10B tokens at 524,288 tokens per step).
pub const REFERENCE_TOTAL_STEPS: u64 = 19_073;

/// EC warmup scaled to a run of `total_steps`.
pub fn scaled_warmup(total_steps: u64) -> u64 {
    ((REFERENCE_WARMUP_STEPS as f64) * total_steps as f64 / REFERENCE_TOTAL_STEPS as f64).round() as u64
}

/// The `k`-th largest entry (1-based, duplicates counted).
pub fn kth_largest(column: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > column.len() {
        return Err(invalid(format!("k = {k} outside 1..={}", column.len())));
    }
    let mut v = column.to_vec();
    let (_, kth, _) = v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    Ok(*kth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub cutoffs: Vec<f64>,
    pub beta: f64,
    pub step: u64,
    pub warmup_steps: u64,
    pub initialized: bool,
}

impl ThresholdState {
    pub fn new(n_experts: usize, beta: f64, warmup_steps: u64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(invalid(format!("beta = {beta} outside (0, 1)")));
        }
        Ok(Self {
            cutoffs: vec![0.0; n_experts],
            beta,
            step: 0,
            warmup_steps,
            initialized: false,
        })
    }

    /// Effective number of tokens averaged over, `N / (1 - beta)`.
    pub fn effective_pool_size(&self, pool_tokens: usize) -> f64 {
        pool_tokens as f64 / (1.0 - self.beta)
    }

    pub fn in_warmup(&self) -> bool {
        self.step < self.warmup_steps
    }

    fn batch_cutoffs(scores: &ScoreMatrix, expansion: usize) -> Result<Vec<f64>> {
        let k = ec_capacity(scores.n_tokens(), expansion)?;
        (0..scores.n_experts()).map(|i| kth_largest(&scores.column(i), k)).collect()
    }

    /// One EMA step from a training pool. The first call adopts the pool's
    /// cutoffs directly.
    pub fn ema_update(&mut self, scores: &ScoreMatrix, expansion: usize) -> Result<()> {
        if scores.n_experts() != self.cutoffs.len() {
            return Err(invalid(format!(
                "score width {} but tracking {} experts",
                scores.n_experts(),
                self.cutoffs.len()
            )));
        }
        let kth = Self::batch_cutoffs(scores, expansion)?;
        if self.initialized {
            for (c, q) in self.cutoffs.iter_mut().zip(kth) {
                *c = self.beta * *c + (1.0 - self.beta) * q;
            }
        } else {
            self.cutoffs = kth;
            self.initialized = true;
        }
        self.step += 1;
        Ok(())
    }

    /// Routes one pool according to the schedule.
    ///
    /// Training: EC during warmup, ET afterwards, and the EMA is updated in
    /// both phases. Inference: ET with the current cutoffs, state untouched.
    pub fn route_with_schedule(
        &mut self,
        scores: &ScoreMatrix,
        config: &RoutingConfig,
        training: bool,
    ) -> Result<Assignment> {
        config.check_width(scores)?;
        let e = config.expansion;
        if !training {
            if !self.initialized {
                return Err(Error::Uninitialized);
            }
            return et_route(scores, &self.cutoffs);
        }
        if self.in_warmup() {
            let a = ec_route(scores, e)?;
            self.ema_update(scores, e)?;
            return Ok(a);
        }
        if !self.initialized {
            // No warmup and no history: this pool's cutoffs seed the EMA.
            self.ema_update(scores, e)?;
            return et_route(scores, &self.cutoffs);
        }
        let a = et_route(scores, &self.cutoffs)?;
        self.ema_update(scores, e)?;
        Ok(a)
    }

    /// ET routing against the current cutoffs without any state change.
    pub fn route_inference(&self, scores: &ScoreMatrix) -> Result<Assignment> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        et_route(scores, &self.cutoffs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::Pool;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, ge: usize) -> ScoreMatrix {
        let v = (0..n * ge).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        ScoreMatrix::new(n, ge, v).unwrap()
    }

    #[test]
    fn kth_largest_cases() {
        assert_eq!(kth_largest(&[3.0, 1.0, 2.0], 2).unwrap(), 2.0);
        assert_eq!(kth_largest(&[5.0, 5.0, 1.0], 2).unwrap(), 5.0);
        assert!(kth_largest(&[1.0], 0).is_err());
        assert!(kth_largest(&[1.0], 2).is_err());
    }

    #[test]
    fn kth_largest_matches_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..1000).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for k in [1, 2, 17, 125, 500, 999, 1000] {
            assert_eq!(kth_largest(&v, k).unwrap(), sorted[k - 1]);
        }
    }

    #[test]
    fn ema_recurrence() {
        let mut st = ThresholdState::new(1, 0.9, 0).unwrap();
        st.cutoffs = vec![1.0];
        st.initialized = true;
        // N=2, E=2 -> k=1, kth largest = 2.0
        let s = ScoreMatrix::new(2, 1, vec![2.0, -1.0]).unwrap();
        st.ema_update(&s, 2).unwrap();
        assert!((st.cutoffs[0] - 1.1).abs() < 1e-12);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn ema_contracts_geometrically() {
        let mut st = ThresholdState::new(1, 0.8, 0).unwrap();
        st.cutoffs = vec![0.0];
        st.initialized = true;
        let s = ScoreMatrix::new(4, 1, vec![3.0, 0.0, -1.0, -2.0]).unwrap();
        let q = 3.0;
        let mut gap = q;
        for _ in 0..30 {
            st.ema_update(&s, 4).unwrap();
            let new_gap = (st.cutoffs[0] - q).abs();
            assert!((new_gap - 0.8 * gap).abs() < 1e-12);
            gap = new_gap;
        }
    }

    #[test]
    fn first_update_adopts_batch_cutoff() {
        let mut st = ThresholdState::new(1, 0.999, 0).unwrap();
        let s = ScoreMatrix::new(4, 1, vec![0.5, 2.0, -1.0, 1.5]).unwrap();
        st.ema_update(&s, 2).unwrap();
        assert_eq!(st.cutoffs, vec![1.5]);
        assert!(ThresholdState::new(1, 1.0, 0).is_err());
        let mut st = ThresholdState::new(2, 0.5, 0).unwrap();
        assert!(matches!(st.ema_update(&ScoreMatrix::new(1, 2, vec![0.0; 2]).unwrap(), 2), Err(Error::InvalidPool { .. })));
    }

    #[test]
    fn schedule_branches() {
        let cfg = RoutingConfig::new(1, 4, 0.5, Pool::Batch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = ThresholdState::new(4, 0.9, 100).unwrap();
        let s = gaussian(&mut rng, 64, 4);
        let a = st.route_with_schedule(&s, &cfg, true).unwrap();
        assert_eq!(a.column_sums(), vec![16; 4]);
        assert_eq!(st.step, 1);

        st.step = 100;
        let before = st.cutoffs.clone();
        let a = st.route_with_schedule(&s, &cfg, true).unwrap();
        assert_eq!(a, et_route(&s, &before).unwrap());
        assert_ne!(st.cutoffs, before);

        let frozen = st.clone();
        let x = st.route_with_schedule(&s, &cfg, false).unwrap();
        let y = st.route_with_schedule(&s, &cfg, false).unwrap();
        assert_eq!(x, y);
        assert_eq!(st, frozen);
    }

    #[test]
    fn inference_needs_initialized_state() {
        let cfg = RoutingConfig::new(1, 2, 0.5, Pool::Batch).unwrap();
        let mut st = ThresholdState::new(2, 0.9, 0).unwrap();
        let s = ScoreMatrix::new(4, 2, vec![0.0; 8]).unwrap();
        assert_eq!(st.route_with_schedule(&s, &cfg, false), Err(Error::Uninitialized));
        // No warmup: the first training pool seeds the cutoffs before routing.
        st.route_with_schedule(&s, &cfg, true).unwrap();
        assert!(st.initialized);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn scaled_warmup_follows_run_length() {
        assert_eq!(scaled_warmup(REFERENCE_TOTAL_STEPS), REFERENCE_WARMUP_STEPS);
        assert_eq!(scaled_warmup(3000), 629);
    }
}
