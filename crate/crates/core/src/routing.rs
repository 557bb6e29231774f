//! Routing kernels: token choice (TC), expert choice (EC) and expert threshold
//! (ET) selection over a score matrix, sigmoid gating and output mixing.
//!
//! All kernels are pure functions of their inputs. Scores are row-major
//! `N x GE` matrices of router logits.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Router logits for one routing pool, row-major `n_tokens x n_experts`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    n_tokens: usize,
    n_experts: usize,
    scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(n_tokens: usize, n_experts: usize, scores: Vec<f64>) -> Result<Self> {
        if n_experts == 0 {
            return Err(invalid("score matrix needs at least one expert"));
        }
        if scores.len() != n_tokens * n_experts {
            return Err(invalid(format!(
                "score buffer has {} entries, expected {}x{}",
                scores.len(),
                n_tokens,
                n_experts
            )));
        }
        if let Some(pos) = scores.iter().position(|s| !s.is_finite()) {
            return Err(invalid(format!("non-finite score at flat index {pos}")));
        }
        Ok(Self {
            n_tokens,
            n_experts,
            scores,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_experts = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_experts) {
            return Err(invalid("ragged score rows"));
        }
        Self::new(rows.len(), n_experts, rows.concat())
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    #[inline]
    pub fn get(&self, token: usize, expert: usize) -> f64 {
        self.scores[token * self.n_experts + expert]
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.scores[token * self.n_experts..(token + 1) * self.n_experts]
    }

    pub fn column(&self, expert: usize) -> Vec<f64> {
        (0..self.n_tokens).map(|t| self.get(t, expert)).collect()
    }

    /// Rows `start..end` as a new matrix (a sub-pool).
    pub fn slice_rows(&self, start: usize, end: usize) -> ScoreMatrix {
        ScoreMatrix {
            n_tokens: end - start,
            n_experts: self.n_experts,
            scores: self.scores[start * self.n_experts..end * self.n_experts].to_vec(),
        }
    }
}

/// Which set of tokens a selection rule ranks against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Sequence,
    Batch,
    Population,
}

/// Granularity `G`, expansion `E` and capacity factor `C` of a routed layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub granularity: usize,
    pub expansion: usize,
    pub capacity_factor: f64,
    pub pool: Pool,
}

impl RoutingConfig {
    pub fn new(granularity: usize, expansion: usize, capacity_factor: f64, pool: Pool) -> Result<Self> {
        let cfg = Self {
            granularity,
            expansion,
            capacity_factor,
            pool,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.granularity == 0 || self.expansion == 0 {
            return Err(invalid("granularity and expansion must be at least 1"));
        }
        if !(self.capacity_factor >= 0.0) || !self.capacity_factor.is_finite() {
            return Err(invalid("capacity factor must be finite and >= 0"));
        }
        Ok(())
    }

    /// Number of routed experts `GE`.
    pub fn n_experts(&self) -> usize {
        self.granularity * self.expansion
    }

    pub fn check_width(&self, scores: &ScoreMatrix) -> Result<()> {
        if scores.n_experts() != self.n_experts() {
            return Err(invalid(format!(
                "score width {} does not match G*E = {}",
                scores.n_experts(),
                self.n_experts()
            )));
        }
        Ok(())
    }
}

/// Binary selection `z` plus sigmoid gates `p`, both `n_tokens x n_experts`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    n_tokens: usize,
    n_experts: usize,
    selected: Vec<bool>,
    gates: Vec<f64>,
}

impl Assignment {
    /// An assignment with no selections; gates come from `scores`.
    pub fn empty(scores: &ScoreMatrix) -> Self {
        Self {
            n_tokens: scores.n_tokens,
            n_experts: scores.n_experts,
            selected: vec![false; scores.scores.len()],
            gates: gate(scores),
        }
    }

    /// Builds an assignment from an explicit selection mask.
    pub fn from_mask(scores: &ScoreMatrix, selected: Vec<bool>) -> Result<Self> {
        if selected.len() != scores.scores.len() {
            return Err(invalid("selection mask shape does not match scores"));
        }
        Ok(Self {
            n_tokens: scores.n_tokens,
            n_experts: scores.n_experts,
            selected,
            gates: gate(scores),
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    #[inline]
    pub fn is_selected(&self, token: usize, expert: usize) -> bool {
        self.selected[token * self.n_experts + expert]
    }

    #[inline]
    pub fn gate(&self, token: usize, expert: usize) -> f64 {
        self.gates[token * self.n_experts + expert]
    }

    pub fn mask(&self) -> &[bool] {
        &self.selected
    }

    pub fn gates(&self) -> &[f64] {
        &self.gates
    }

    pub(crate) fn set(&mut self, token: usize, expert: usize, on: bool) {
        self.selected[token * self.n_experts + expert] = on;
    }

    /// Number of experts selected by `token` (its fanout).
    pub fn row_sum(&self, token: usize) -> usize {
        self.selected[token * self.n_experts..(token + 1) * self.n_experts]
            .iter()
            .filter(|&&s| s)
            .count()
    }

    /// Number of tokens selected by `expert` (its load).
    pub fn column_sum(&self, expert: usize) -> usize {
        (0..self.n_tokens).filter(|&t| self.is_selected(t, expert)).count()
    }

    pub fn column_sums(&self) -> Vec<usize> {
        let mut sums = vec![0; self.n_experts];
        for t in 0..self.n_tokens {
            for (i, s) in sums.iter_mut().enumerate() {
                *s += usize::from(self.is_selected(t, i));
            }
        }
        sums
    }

    /// Tokens selected by `expert`, ascending.
    pub fn tokens_for(&self, expert: usize) -> Vec<usize> {
        (0..self.n_tokens).filter(|&t| self.is_selected(t, expert)).collect()
    }

    /// Experts selected by `token`, ascending.
    pub fn experts_for(&self, token: usize) -> Vec<usize> {
        (0..self.n_experts).filter(|&i| self.is_selected(token, i)).collect()
    }

    pub fn total_selected(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    /// Stacks assignments over disjoint token ranges (e.g. per-sequence pools).
    pub fn concat(parts: &[Assignment]) -> Result<Self> {
        let n_experts = parts.first().map_or(0, |a| a.n_experts);
        if parts.iter().any(|a| a.n_experts != n_experts) {
            return Err(invalid("cannot concatenate assignments of different widths"));
        }
        Ok(Self {
            n_tokens: parts.iter().map(|a| a.n_tokens).sum(),
            n_experts,
            selected: parts.iter().flat_map(|a| a.selected.iter().copied()).collect(),
            gates: parts.iter().flat_map(|a| a.gates.iter().copied()).collect(),
        })
    }
}

/// Descending by value, ascending by index on ties. Values are finite, and
/// `-0.0` ties with `0.0`.
fn rank_desc(values: &[f64], a: usize, b: usize) -> Ordering {
    values[b].partial_cmp(&values[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// Indices of the `k` largest entries, ties going to the lowest index.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_desc(values, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Token choice: every token takes its top-`granularity` experts by
/// `score + bias`. Gates always use the unbiased scores.
pub fn tc_route(scores: &ScoreMatrix, granularity: usize, bias: Option<&[f64]>) -> Result<Assignment> {
    let ge = scores.n_experts;
    if granularity > ge {
        return Err(invalid(format!("granularity {granularity} exceeds {ge} experts")));
    }
    if let Some(b) = bias {
        if b.len() != ge {
            return Err(invalid(format!("bias has {} entries, expected {ge}", b.len())));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(invalid("bias must be finite"));
        }
    }
    let mut out = Assignment::empty(scores);
    let mut biased = vec![0.0; ge];
    for t in 0..scores.n_tokens {
        let row = scores.row(t);
        let ranked: &[f64] = match bias {
            Some(b) => {
                for ((dst, &r), &bi) in biased.iter_mut().zip(row).zip(b) {
                    *dst = r + bi;
                }
                &biased
            }
            None => row,
        };
        for i in top_k_indices(ranked, granularity) {
            out.set(t, i, true);
        }
    }
    Ok(out)
}

/// Per-expert capacity `k = floor(N / E)` of an EC pool.
pub fn ec_capacity(n_tokens: usize, expansion: usize) -> Result<usize> {
    if expansion == 0 {
        return Err(invalid("expansion must be at least 1"));
    }
    if n_tokens < expansion {
        return Err(Error::InvalidPool {
            n_tokens,
            expansion,
        });
    }
    Ok(n_tokens / expansion)
}

/// Expert choice: every expert takes its top-`k` tokens, `k = floor(N/E)`,
/// ties going to the earlier token. An empty pool yields an empty assignment.
pub fn ec_route(scores: &ScoreMatrix, expansion: usize) -> Result<Assignment> {
    let mut out = Assignment::empty(scores);
    if scores.n_tokens == 0 {
        return Ok(out);
    }
    let k = ec_capacity(scores.n_tokens, expansion)?;
    for i in 0..scores.n_experts {
        let col = scores.column(i);
        for t in top_k_indices(&col, k) {
            out.set(t, i, true);
        }
    }
    Ok(out)
}

/// Expert threshold: `z[t,i] = score[t,i] > thresholds[i]` (strict).
pub fn et_route(scores: &ScoreMatrix, thresholds: &[f64]) -> Result<Assignment> {
    if thresholds.len() != scores.n_experts {
        return Err(invalid(format!(
            "{} thresholds for {} experts",
            thresholds.len(),
            scores.n_experts
        )));
    }
    if thresholds.iter().any(|c| c.is_nan()) {
        return Err(invalid("thresholds must not be NaN"));
    }
    let selected = scores
        .scores
        .chunks(scores.n_experts)
        .flat_map(|row| row.iter().zip(thresholds).map(|(r, c)| r > c))
        .collect();
    Assignment::from_mask(scores, selected)
}

/// Logistic sigmoid clamped into the open interval (0, 1).
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Elementwise sigmoid gates `p = sigmoid(r)`.
pub fn gate(scores: &ScoreMatrix) -> Vec<f64> {
    scores.scores.iter().map(|&r| sigmoid(r)).collect()
}

/// Options for [`mix_outputs_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MixOptions {
    /// Divide each token's routed sum by its fanout. Off by default.
    pub fanout_norm: bool,
}

/// `y_t = shared_t + sum_i z[t,i] * p[t,i] * expert_outputs[i,t]`.
///
/// `expert_outputs` is `GE x N x d` and `shared` is `N x d`, both row-major.
pub fn mix_outputs(assignment: &Assignment, expert_outputs: &[f64], shared: &[f64], d: usize) -> Result<Vec<f64>> {
    mix_outputs_with(assignment, expert_outputs, shared, d, MixOptions::default())
}

pub fn mix_outputs_with(
    assignment: &Assignment,
    expert_outputs: &[f64],
    shared: &[f64],
    d: usize,
    opts: MixOptions,
) -> Result<Vec<f64>> {
    let (n, ge) = (assignment.n_tokens, assignment.n_experts);
    if shared.len() != n * d {
        return Err(invalid(format!("shared output has {} entries, expected {n}x{d}", shared.len())));
    }
    if expert_outputs.len() != ge * n * d {
        return Err(invalid(format!(
            "expert outputs have {} entries, expected {ge}x{n}x{d}",
            expert_outputs.len()
        )));
    }
    let mut out = shared.to_vec();
    let mut routed = vec![0.0; d];
    for t in 0..n {
        routed.iter_mut().for_each(|v| *v = 0.0);
        let mut fanout = 0usize;
        for i in 0..ge {
            if !assignment.is_selected(t, i) {
                continue;
            }
            fanout += 1;
            let p = assignment.gate(t, i);
            let y = &expert_outputs[(i * n + t) * d..(i * n + t + 1) * d];
            for (acc, &v) in routed.iter_mut().zip(y) {
                *acc += p * v;
            }
        }
        let scale = if opts.fanout_norm && fanout > 0 {
            1.0 / fanout as f64
        } else {
            1.0
        };
        for (o, r) in out[t * d..(t + 1) * d].iter_mut().zip(&routed) {
            *o += scale * r;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scores(rng: &mut ChaCha8Rng, n: usize, ge: usize) -> ScoreMatrix {
        let v = (0..n * ge).map(|_| rng.gen_range(-3.0..3.0)).collect();
        ScoreMatrix::new(n, ge, v).unwrap()
    }

    /// All size-`k` subsets of `0..n` in lexicographic order.
    fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
        fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for i in start..n {
                cur.push(i);
                rec(i + 1, n, k, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        rec(0, n, k, &mut Vec::new(), &mut out);
        out
    }

    /// Exhaustive oracle: the subset with the largest score sum.
    fn best_subset(values: &[f64], k: usize) -> Vec<usize> {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for s in subsets(values.len(), k) {
            let sum: f64 = s.iter().map(|&i| values[i]).sum();
            if best.as_ref().map_or(true, |(b, _)| sum > *b) {
                best = Some((sum, s));
            }
        }
        best.map(|(_, s)| s).unwrap_or_default()
    }

    #[test]
    fn tc_argmax() {
        let s = ScoreMatrix::from_rows(&[vec![0.3, -0.1, 0.7]]).unwrap();
        let a = tc_route(&s, 1, None).unwrap();
        assert_eq!(a.mask(), &[false, false, true]);
    }

    #[test]
    fn tc_tie_goes_to_lowest_index() {
        let s = ScoreMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let a = tc_route(&s, 1, None).unwrap();
        assert_eq!(a.mask(), &[true, false]);
    }

    #[test]
    fn signed_zeros_tie() {
        let s = ScoreMatrix::from_rows(&[vec![-0.0, 0.0], vec![0.0, -0.0], vec![-1.0, -1.0]]).unwrap();
        assert_eq!(tc_route(&s, 1, None).unwrap().experts_for(0), vec![0]);
        let ec = ec_route(&s, 3).unwrap();
        assert_eq!(ec.tokens_for(0), vec![0]);
        assert_eq!(ec.tokens_for(1), vec![0]);
    }

    #[test]
    fn tc_rejects_granularity_above_width() {
        let s = ScoreMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(matches!(tc_route(&s, 3, None), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn tc_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let s = random_scores(&mut rng, 6, 4);
            let a = tc_route(&s, 2, None).unwrap();
            for t in 0..6 {
                assert_eq!(a.experts_for(t), best_subset(s.row(t), 2));
            }
        }
    }

    #[test]
    fn ec_single_expert_top2() {
        let s = ScoreMatrix::new(4, 1, vec![0.1, 0.9, -0.3, 0.5]).unwrap();
        let a = ec_route(&s, 2).unwrap();
        assert_eq!(a.tokens_for(0), vec![1, 3]);
    }

    #[test]
    fn ec_column_sums_are_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_scores(&mut rng, 8, 4);
        let a = ec_route(&s, 4).unwrap();
        assert_eq!(a.column_sums(), vec![2; 4]);
    }

    #[test]
    fn ec_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..3 {
            let s = random_scores(&mut rng, 16, 2);
            let a = ec_route(&s, 2).unwrap();
            for i in 0..2 {
                assert_eq!(a.tokens_for(i), best_subset(&s.column(i), 8));
            }
        }
    }

    #[test]
    fn ec_tie_goes_to_earliest_token() {
        let s = ScoreMatrix::new(4, 1, vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(ec_route(&s, 2).unwrap().tokens_for(0), vec![0, 1]);
    }

    #[test]
    fn ec_pool_errors() {
        let s = ScoreMatrix::new(3, 2, vec![0.0; 6]).unwrap();
        assert_eq!(
            ec_route(&s, 4),
            Err(Error::InvalidPool {
                n_tokens: 3,
                expansion: 4
            })
        );
        let empty = ScoreMatrix::new(0, 2, vec![]).unwrap();
        assert_eq!(ec_route(&empty, 4).unwrap().n_tokens(), 0);
    }

    #[test]
    fn et_strict_threshold() {
        let s = ScoreMatrix::new(3, 1, vec![0.2, -0.2, 0.0]).unwrap();
        let a = et_route(&s, &[0.0]).unwrap();
        assert_eq!(a.mask(), &[true, false, false]);
        assert!(et_route(&s, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn et_quantile_threshold_gives_expected_load() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, ge, e) = (32, 4, 4);
        let v: Vec<f64> = (0..n * ge).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = ScoreMatrix::new(n, ge, v).unwrap();
        // Empirical (1 - 1/E) quantile: anything strictly between the k-th and
        // (k+1)-th largest admits exactly k tokens.
        let thresholds: Vec<f64> = (0..ge)
            .map(|i| {
                let mut col = s.column(i);
                col.sort_by(|a, b| b.total_cmp(a));
                0.5 * (col[n / e - 1] + col[n / e])
            })
            .collect();
        let a = et_route(&s, &thresholds).unwrap();
        assert_eq!(a.column_sums(), vec![n / e; ge]);
    }

    #[test]
    fn gate_values() {
        let s = ScoreMatrix::new(1, 3, vec![0.0, 1.0, 800.0]).unwrap();
        let g = gate(&s);
        assert_eq!(g[0], 0.5);
        assert!((g[1] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((g[1] - 0.7310585786).abs() < 1e-10);
        assert!(g[2] < 1.0 && g[2] > 0.999);
        let mut prev = 0.0;
        for x in [0.0, 1.0, 5.0, 20.0, 40.0, 1e3] {
            let v = sigmoid(x);
            assert!(v >= prev && v < 1.0);
            prev = v;
        }
        assert!(sigmoid(-1e3) > 0.0);
    }

    #[test]
    fn mix_empty_row_is_shared() {
        let s = ScoreMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let a = Assignment::empty(&s);
        let y = mix_outputs(&a, &[9.0, 9.0, 7.0, 7.0], &[1.0, 2.0], 2).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
    }

    #[test]
    fn mix_one_expert() {
        let s = ScoreMatrix::new(1, 1, vec![0.0]).unwrap();
        let a = Assignment::from_mask(&s, vec![true]).unwrap();
        let y = mix_outputs(&a, &[2.0, 2.0], &[1.0, 1.0], 2).unwrap();
        assert_eq!(y, vec![2.0, 2.0]);
        assert!(mix_outputs(&a, &[2.0], &[1.0, 1.0], 2).is_err());
    }

    #[test]
    fn mix_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, ge, d) = (5, 3, 4);
        let s = random_scores(&mut rng, n, ge);
        let mask: Vec<bool> = (0..n * ge).map(|_| rng.gen_bool(0.5)).collect();
        let a = Assignment::from_mask(&s, mask).unwrap();
        let ys: Vec<f64> = (0..ge * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sh: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = mix_outputs(&a, &ys, &sh, d).unwrap();
        for t in 0..n {
            for j in 0..d {
                let mut want = sh[t * d + j];
                for i in 0..ge {
                    if a.is_selected(t, i) {
                        want += sigmoid(s.get(t, i)) * ys[i * n * d + t * d + j];
                    }
                }
                assert!((got[t * d + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mix_fanout_norm_divides_routed_part() {
        let s = ScoreMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let a = Assignment::from_mask(&s, vec![true, true]).unwrap();
        let y = mix_outputs_with(&a, &[2.0, 4.0], &[1.0], 1, MixOptions { fanout_norm: true }).unwrap();
        assert_eq!(y, vec![1.0 + 0.5 * (0.5 * 2.0 + 0.5 * 4.0)]);
    }

    fn matrix_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..12, 1usize..6).prop_flat_map(|(n, ge)| {
            (Just(n), Just(ge), proptest::collection::vec(-4.0f64..4.0, n * ge))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn tc_rows_sum_to_granularity((n, ge, v) in matrix_strategy(), g in 0usize..6) {
            let g = g.min(ge);
            let s = ScoreMatrix::new(n, ge, v).unwrap();
            let a = tc_route(&s, g, None).unwrap();
            for t in 0..n {
                prop_assert_eq!(a.row_sum(t), g);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn ec_columns_sum_to_k((n, ge, v) in matrix_strategy(), e in 1usize..5) {
            let s = ScoreMatrix::new(n, ge, v).unwrap();
            match ec_route(&s, e) {
                Ok(a) => prop_assert!(a.column_sums().iter().all(|&c| c == n / e)),
                Err(err) => prop_assert!(n < e, "unexpected {err}"),
            }
        }

        #[test]
        fn et_is_prefix_causal((n, ge, v) in matrix_strategy(), c in proptest::collection::vec(-2.0f64..2.0, 6), cut in 0usize..12) {
            let s = ScoreMatrix::new(n, ge, v).unwrap();
            let c = &c[..ge];
            let full = et_route(&s, c).unwrap();
            let cut = cut.min(n);
            let prefix = et_route(&s.slice_rows(0, cut), c).unwrap();
            prop_assert_eq!(prefix.mask(), &full.mask()[..cut * ge]);
        }

        #[test]
        fn et_raising_threshold_never_adds((n, ge, v) in matrix_strategy(), c in -2.0f64..2.0, bump in 0.0f64..2.0) {
            let s = ScoreMatrix::new(n, ge, v).unwrap();
            let lo = vec![c; ge];
            let mut hi = lo.clone();
            hi[0] += bump;
            let a = et_route(&s, &lo).unwrap();
            let b = et_route(&s, &hi).unwrap();
            for t in 0..n {
                prop_assert!(!b.is_selected(t, 0) || a.is_selected(t, 0));
            }
        }

        #[test]
        fn routing_is_permutation_equivariant((n, ge, v) in matrix_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let s = ScoreMatrix::new(n, ge, v).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let rows: Vec<Vec<f64>> = perm.iter().map(|&t| s.row(t).to_vec()).collect();
            let p = ScoreMatrix::from_rows(&rows).unwrap();
            let c = vec![0.1; ge];
            let (tc, tcp) = (tc_route(&s, 1, None).unwrap(), tc_route(&p, 1, None).unwrap());
            let (et, etp) = (et_route(&s, &c).unwrap(), et_route(&p, &c).unwrap());
            for (new_t, &old_t) in perm.iter().enumerate() {
                prop_assert_eq!(tcp.experts_for(new_t), tc.experts_for(old_t));
                prop_assert_eq!(etp.experts_for(new_t), et.experts_for(old_t));
            }
            // Continuous scores: EC ties have probability zero.
            if n >= 2 {
                let (ec, ecp) = (ec_route(&s, 2).unwrap(), ec_route(&p, 2).unwrap());
                for (new_t, &old_t) in perm.iter().enumerate() {
                    prop_assert_eq!(ecp.experts_for(new_t), ec.experts_for(old_t));
                }
            }
        }

        #[test]
        fn tc_bias_moves_selection_not_gates((n, ge, v) in matrix_strategy(), b in proptest::collection::vec(-3.0f64..3.0, 6)) {
            let s = ScoreMatrix::new(n, ge, v).unwrap();
            let biased = tc_route(&s, 1, Some(&b[..ge])).unwrap();
            let plain = tc_route(&s, 1, None).unwrap();
            prop_assert_eq!(biased.gates(), plain.gates());
            for t in 0..n {
                for i in biased.experts_for(t) {
                    prop_assert_eq!(biased.gate(t, i), sigmoid(s.get(t, i)));
                }
            }
        }
    }
}
