//! Routing-consistency and activation metrics over routing traces.
//!
//! A trace records, for each (layer, token) pair of a fixed evaluation
//! stream, the set of routed experts that fired. The always-on shared expert
//! never appears in a trace.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Expert identity as emitted by a model; shared-expert hits are dropped when
/// building a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertId {
    Routed(usize),
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMeta {
    /// Position of the token inside its sequence window.
    pub position: usize,
    /// Next-token loss in nats.
    pub loss: f64,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    n_layers: usize,
    n_experts: usize,
    tokens: Vec<TokenMeta>,
    /// Sorted expert lists, indexed `layer * n_tokens + token`.
    active: Vec<Vec<u32>>,
    stream_hash: Option<String>,
}

impl RoutingTrace {
    pub fn new(n_layers: usize, n_experts: usize, tokens: Vec<TokenMeta>) -> Self {
        let n_tokens = tokens.len();
        Self {
            n_layers,
            n_experts,
            tokens,
            active: vec![Vec::new(); n_layers * n_tokens],
            stream_hash: None,
        }
    }

    pub fn with_stream_hash(mut self, hash: impl Into<String>) -> Self {
        self.stream_hash = Some(hash.into());
        self
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn tokens(&self) -> &[TokenMeta] {
        &self.tokens
    }

    pub fn stream_hash(&self) -> Option<&str> {
        self.stream_hash.as_deref()
    }

    /// Records an activation; shared-expert hits are ignored.
    pub fn push(&mut self, layer: usize, token: usize, expert: ExpertId) -> Result<()> {
        let ExpertId::Routed(expert) = expert else {
            return Ok(());
        };
        if layer >= self.n_layers || token >= self.tokens.len() || expert >= self.n_experts {
            return Err(invalid(format!(
                "edge ({layer}, {token}, {expert}) outside {}x{}x{}",
                self.n_layers,
                self.tokens.len(),
                self.n_experts
            )));
        }
        let set = &mut self.active[layer * self.tokens.len() + token];
        if let Err(pos) = set.binary_search(&(expert as u32)) {
            set.insert(pos, expert as u32);
        }
        Ok(())
    }

    pub fn add_edge(&mut self, layer: usize, token: usize, expert: usize) -> Result<()> {
        self.push(layer, token, ExpertId::Routed(expert))
    }

    /// Active routed experts for `(layer, token)`, ascending.
    pub fn active(&self, layer: usize, token: usize) -> &[u32] {
        &self.active[layer * self.tokens.len() + token]
    }

    pub fn edge_count(&self) -> usize {
        self.active.iter().map(Vec::len).sum()
    }

    /// All edges as `(layer, token, expert)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let n = self.tokens.len();
        self.active
            .iter()
            .enumerate()
            .flat_map(move |(j, set)| set.iter().map(move |&i| (j / n.max(1), j % n.max(1), i as usize)))
    }

    /// Total routed activations of `token` across layers.
    pub fn fanout(&self, token: usize) -> usize {
        (0..self.n_layers).map(|l| self.active(l, token).len()).sum()
    }

    fn check_universe(&self, other: &Self) -> Result<()> {
        if self.n_layers != other.n_layers || self.tokens.len() != other.tokens.len() || self.n_experts != other.n_experts {
            return Err(Error::InvalidComparison(format!(
                "trace shapes differ: {}x{}x{} vs {}x{}x{}",
                self.n_layers,
                self.tokens.len(),
                self.n_experts,
                other.n_layers,
                other.tokens.len(),
                other.n_experts
            )));
        }
        if let (Some(a), Some(b)) = (&self.stream_hash, &other.stream_hash) {
            if a != b {
                return Err(Error::InvalidComparison(format!("stream hashes differ: {a} vs {b}")));
            }
        }
        Ok(())
    }
}

fn intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `(|E_A ∩ E_B|, |E_A|, |E_B|)` over pooled edges.
fn pooled_counts(a: &RoutingTrace, b: &RoutingTrace) -> Result<(usize, usize, usize)> {
    a.check_universe(b)?;
    let inter = a.active.iter().zip(&b.active).map(|(x, y)| intersection_len(x, y)).sum();
    Ok((inter, a.edge_count(), b.edge_count()))
}

/// Pooled-edge intersection over union; 1 when both traces are empty.
pub fn weighted_jaccard(a: &RoutingTrace, b: &RoutingTrace) -> Result<f64> {
    let (inter, na, nb) = pooled_counts(a, b)?;
    let union = na + nb - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Pooled-edge Dice coefficient; 1 when both traces are empty.
pub fn weighted_dice(a: &RoutingTrace, b: &RoutingTrace) -> Result<f64> {
    let (inter, na, nb) = pooled_counts(a, b)?;
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    })
}

/// Per token-layer Jaccard and Dice of two expert sets.
pub fn set_overlap(a: &[u32], b: &[u32]) -> (f64, f64) {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => (1.0, 1.0),
        (true, false) | (false, true) => (0.0, 0.0),
        (false, false) => {
            let inter = intersection_len(a, b) as f64;
            let union = (a.len() + b.len()) as f64 - inter;
            (inter / union, 2.0 * inter / (a.len() + b.len()) as f64)
        }
    }
}

/// Jensen-Shannon divergence (bits) and total variation between uniform
/// distributions over two expert sets.
pub fn set_divergence(a: &[u32], b: &[u32]) -> (f64, f64) {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => (0.0, 0.0),
        (true, false) | (false, true) => (1.0, 1.0),
        (false, false) => {
            let pa = 1.0 / a.len() as f64;
            let pb = 1.0 / b.len() as f64;
            let inter = intersection_len(a, b) as f64;
            let only_a = a.len() as f64 - inter;
            let only_b = b.len() as f64 - inter;
            let m_shared = 0.5 * (pa + pb);
            // KL(P||M): shared support has mass pa against m_shared; A-only
            // support has pa against pa/2. Symmetric for Q.
            let kl_a = inter * pa * (pa / m_shared).log2() + only_a * pa;
            let kl_b = inter * pb * (pb / m_shared).log2() + only_b * pb;
            let jsd = 0.5 * kl_a + 0.5 * kl_b;
            let tv = 0.5 * (inter * (pa - pb).abs() + only_a * pa + only_b * pb);
            (jsd.clamp(0.0, 1.0), tv.clamp(0.0, 1.0))
        }
    }
}

fn token_layer_mean(a: &RoutingTrace, b: &RoutingTrace, f: impl Fn(&[u32], &[u32]) -> (f64, f64)) -> Result<(f64, f64)> {
    a.check_universe(b)?;
    let pairs = a.active.len();
    if pairs == 0 {
        return Ok(f(&[], &[]));
    }
    let (sx, sy) = a
        .active
        .iter()
        .zip(&b.active)
        .map(|(x, y)| f(x, y))
        .fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x, sy + y));
    Ok((sx / pairs as f64, sy / pairs as f64))
}

/// Mean token-level `(Jaccard, Dice)` over all token-layer pairs.
pub fn token_overlap(a: &RoutingTrace, b: &RoutingTrace) -> Result<(f64, f64)> {
    token_layer_mean(a, b, set_overlap)
}

/// Mean token-level `(joint JSD, total variation)` over all token-layer pairs.
pub fn token_divergence(a: &RoutingTrace, b: &RoutingTrace) -> Result<(f64, f64)> {
    token_layer_mean(a, b, set_divergence)
}

/// All pairwise consistency metrics in one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Consistency {
    pub weighted_jaccard: f64,
    pub weighted_dice: f64,
    pub jaccard: f64,
    pub dice: f64,
    pub joint_jsd: f64,
    pub total_variation: f64,
}

pub fn consistency(a: &RoutingTrace, b: &RoutingTrace) -> Result<Consistency> {
    let (jaccard, dice) = token_overlap(a, b)?;
    let (joint_jsd, total_variation) = token_divergence(a, b)?;
    Ok(Consistency {
        weighted_jaccard: weighted_jaccard(a, b)?,
        weighted_dice: weighted_dice(a, b)?,
        jaccard,
        dice,
        joint_jsd,
        total_variation,
    })
}

/// Fraction of `domain` tokens routed to each expert, `n_layers x n_experts`.
pub fn expert_token_ratio(trace: &RoutingTrace, domain: &str) -> Result<Vec<Vec<f64>>> {
    let members: Vec<usize> = (0..trace.n_tokens()).filter(|&t| trace.tokens[t].domain == domain).collect();
    if members.is_empty() {
        return Err(Error::EmptyDomain(domain.to_string()));
    }
    let denom = members.len() as f64;
    Ok((0..trace.n_layers)
        .map(|l| {
            let mut counts = vec![0usize; trace.n_experts];
            for &t in &members {
                for &i in trace.active(l, t) {
                    counts[i as usize] += 1;
                }
            }
            counts.into_iter().map(|c| c as f64 / denom).collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionFanout {
    pub position: usize,
    pub count: usize,
    pub mean_fanout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBin {
    pub loss_lo: f64,
    pub loss_hi: f64,
    pub count: usize,
    pub mean_loss: f64,
    /// Mean total fanout across layers.
    pub mean_fanout: f64,
    /// Mean fanout of each layer.
    pub layer_fanout: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FanoutStats {
    pub by_position: Vec<PositionFanout>,
    pub by_loss: Vec<LossBin>,
}

/// Mean fanout grouped by sequence position, and by equal-count loss bins
/// (per layer and summed over layers).
pub fn fanout_stats(trace: &RoutingTrace, loss_bins: usize) -> Result<FanoutStats> {
    if loss_bins == 0 {
        return Err(invalid("loss_bins must be at least 1"));
    }
    let n = trace.n_tokens();
    let fanout: Vec<usize> = (0..n).map(|t| trace.fanout(t)).collect();

    let mut by_pos: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (t, meta) in trace.tokens.iter().enumerate() {
        let e = by_pos.entry(meta.position).or_default();
        e.0 += 1;
        e.1 += fanout[t];
    }
    let by_position = by_pos
        .into_iter()
        .map(|(position, (count, total))| PositionFanout {
            position,
            count,
            mean_fanout: total as f64 / count as f64,
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| trace.tokens[a].loss.total_cmp(&trace.tokens[b].loss).then(a.cmp(&b)));
    let bins = loss_bins.min(n);
    let mut by_loss = Vec::with_capacity(bins);
    for b in 0..bins {
        let members = &order[b * n / bins..(b + 1) * n / bins];
        let count = members.len() as f64;
        let layer_fanout = (0..trace.n_layers)
            .map(|l| members.iter().map(|&t| trace.active(l, t).len()).sum::<usize>() as f64 / count)
            .collect();
        by_loss.push(LossBin {
            loss_lo: trace.tokens[members[0]].loss,
            loss_hi: trace.tokens[*members.last().expect("non-empty bin")].loss,
            count: members.len(),
            mean_loss: members.iter().map(|&t| trace.tokens[t].loss).sum::<f64>() / count,
            mean_fanout: members.iter().map(|&t| fanout[t]).sum::<usize>() as f64 / count,
            layer_fanout,
        });
    }
    Ok(FanoutStats { by_position, by_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(n: usize) -> Vec<TokenMeta> {
        (0..n)
            .map(|t| TokenMeta {
                position: t,
                loss: t as f64,
                domain: if t % 2 == 0 { "even".into() } else { "odd".into() },
            })
            .collect()
    }

    fn trace(n_layers: usize, n_tokens: usize, edges: &[(usize, usize, usize)]) -> RoutingTrace {
        let mut t = RoutingTrace::new(n_layers, 4, meta(n_tokens));
        for &(l, tok, i) in edges {
            t.add_edge(l, tok, i).unwrap();
        }
        t
    }

    #[test]
    fn pooled_examples() {
        let a = trace(1, 2, &[(0, 0, 1), (0, 1, 2)]);
        let b = trace(1, 2, &[(0, 0, 1)]);
        assert_eq!(weighted_jaccard(&a, &b).unwrap(), 0.5);
        assert!((weighted_dice(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(weighted_jaccard(&a, &a).unwrap(), 1.0);
        let c = trace(1, 2, &[(0, 0, 3)]);
        assert_eq!(weighted_jaccard(&a, &c).unwrap(), 0.0);
        assert_eq!(weighted_dice(&a, &c).unwrap(), 0.0);
        let e = trace(1, 2, &[]);
        assert_eq!(weighted_jaccard(&e, &e).unwrap(), 1.0);
        assert_eq!(weighted_dice(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn token_examples() {
        assert_eq!(set_overlap(&[1, 2], &[2, 3]), (1.0 / 3.0, 0.5));
        assert_eq!(set_overlap(&[], &[]), (1.0, 1.0));
        assert_eq!(set_overlap(&[1], &[]), (0.0, 0.0));
        let (jsd, tv) = set_divergence(&[1, 2], &[2, 3]);
        assert!((jsd - 0.5).abs() < 1e-15);
        assert!((tv - 0.5).abs() < 1e-15);
        assert_eq!(set_divergence(&[1, 2], &[1, 2]), (0.0, 0.0));
        assert_eq!(set_divergence(&[1], &[2]), (1.0, 1.0));
        assert_eq!(set_divergence(&[], &[]), (0.0, 0.0));
        assert_eq!(set_divergence(&[], &[0]), (1.0, 1.0));
    }

    #[test]
    fn mismatched_universe_rejected() {
        let a = trace(1, 2, &[]);
        let b = trace(2, 2, &[]);
        assert!(matches!(weighted_jaccard(&a, &b), Err(Error::InvalidComparison(_))));
        let a = trace(1, 2, &[]).with_stream_hash("x");
        let b = trace(1, 2, &[]).with_stream_hash("y");
        assert!(matches!(token_overlap(&a, &b), Err(Error::InvalidComparison(_))));
    }

    #[test]
    fn shared_expert_is_stripped() {
        let mut a = trace(1, 2, &[(0, 0, 1)]);
        let b = a.clone();
        a.push(0, 0, ExpertId::Shared).unwrap();
        a.push(0, 1, ExpertId::Shared).unwrap();
        assert_eq!(a, b);
        assert!(a.add_edge(0, 0, 4).is_err());
    }

    #[test]
    fn token_ratio() {
        let mut t = RoutingTrace::new(
            1,
            4,
            (0..4)
                .map(|p| TokenMeta {
                    position: p,
                    loss: 0.0,
                    domain: "math".into(),
                })
                .collect(),
        );
        t.add_edge(0, 0, 3).unwrap();
        t.add_edge(0, 2, 3).unwrap();
        for tok in 0..4 {
            t.add_edge(0, tok, 1).unwrap();
        }
        let r = expert_token_ratio(&t, "math").unwrap();
        assert_eq!(r[0], vec![0.0, 1.0, 0.0, 0.5]);
        assert_eq!(expert_token_ratio(&t, "code"), Err(Error::EmptyDomain("code".into())));
    }

    #[test]
    fn fanout_examples() {
        let t = trace(2, 3, &[(0, 1, 0), (1, 1, 2)]);
        assert_eq!(t.fanout(0), 0);
        assert_eq!(t.fanout(1), 2);
        let st = fanout_stats(&t, 3).unwrap();
        assert_eq!(st.by_position.iter().map(|p| p.mean_fanout).collect::<Vec<_>>(), vec![0.0, 2.0, 0.0]);
        assert_eq!(st.by_loss.len(), 3);
        assert_eq!(st.by_loss[1].layer_fanout, vec![1.0, 1.0]);
        assert!(fanout_stats(&t, 0).is_err());
    }

    #[test]
    fn fanout_matches_naive_count() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let mut edges = Vec::new();
        for l in 0..3 {
            for tok in 0..50 {
                for i in 0..4 {
                    if rng.gen_bool(0.3) {
                        edges.push((l, tok, i));
                    }
                }
            }
        }
        let t = trace(3, 50, &edges);
        for tok in 0..50 {
            assert_eq!(t.fanout(tok), edges.iter().filter(|e| e.1 == tok).count());
        }
        let st = fanout_stats(&t, 5).unwrap();
        assert_eq!(st.by_loss.iter().map(|b| b.count).sum::<usize>(), 50);
        // Loss equals token index, so bin b holds tokens 10b..10b+9.
        for (b, bin) in st.by_loss.iter().enumerate() {
            let want = (10 * b..10 * b + 10).map(|tok| t.fanout(tok)).sum::<usize>() as f64 / 10.0;
            assert_eq!(bin.mean_fanout, want);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use std::collections::HashSet;

        fn dense_divergence(a: &[u32], b: &[u32], e: usize) -> (f64, f64) {
            let dist = |s: &[u32]| {
                let mut p = vec![0.0; e];
                for &i in s {
                    p[i as usize] = 1.0 / s.len() as f64;
                }
                p
            };
            let (p, q) = (dist(a), dist(b));
            let m: Vec<f64> = p.iter().zip(&q).map(|(x, y)| 0.5 * (x + y)).collect();
            let kl = |p: &[f64]| {
                p.iter()
                    .zip(&m)
                    .filter(|(x, _)| **x > 0.0)
                    .map(|(x, mm)| x * (x / mm).log2())
                    .sum::<f64>()
            };
            let tv = 0.5 * p.iter().zip(&q).map(|(x, y)| (x - y).abs()).sum::<f64>();
            (0.5 * kl(&p) + 0.5 * kl(&q), tv)
        }

        fn edges() -> impl Strategy<Value = Vec<(usize, usize, usize)>> {
            prop::collection::vec((0..2usize, 0..6usize, 0..4usize), 0..30)
        }

        proptest! {
            #[test]
            fn pooled_matches_hash_sets(ea in edges(), eb in edges()) {
                let (a, b) = (trace(2, 6, &ea), trace(2, 6, &eb));
                let sa: HashSet<_> = ea.iter().copied().collect();
                let sb: HashSet<_> = eb.iter().copied().collect();
                let inter = sa.intersection(&sb).count() as f64;
                let union = sa.union(&sb).count() as f64;
                let j = if union == 0.0 { 1.0 } else { inter / union };
                let total = (sa.len() + sb.len()) as f64;
                let dice = if total == 0.0 { 1.0 } else { 2.0 * inter / total };
                prop_assert!((weighted_jaccard(&a, &b).unwrap() - j).abs() < 1e-12);
                prop_assert!((weighted_dice(&a, &b).unwrap() - dice).abs() < 1e-12);
                prop_assert_eq!(a.edges().collect::<HashSet<_>>(), sa);
            }

            #[test]
            fn token_metrics_match_dense_oracle(ea in edges(), eb in edges()) {
                let (a, b) = (trace(2, 6, &ea), trace(2, 6, &eb));
                let (mut sj, mut sd, mut sjsd, mut stv) = (0.0, 0.0, 0.0, 0.0);
                for l in 0..2 {
                    for t in 0..6 {
                        let x: HashSet<_> = ea.iter().filter(|e| e.0 == l && e.1 == t).map(|e| e.2 as u32).collect();
                        let y: HashSet<_> = eb.iter().filter(|e| e.0 == l && e.1 == t).map(|e| e.2 as u32).collect();
                        let inter = x.intersection(&y).count() as f64;
                        let (j, d) = match (x.is_empty(), y.is_empty()) {
                            (true, true) => (1.0, 1.0),
                            (false, false) => (inter / x.union(&y).count() as f64, 2.0 * inter / (x.len() + y.len()) as f64),
                            _ => (0.0, 0.0),
                        };
                        let (jsd, tv) = match (x.is_empty(), y.is_empty()) {
                            (true, true) => (0.0, 0.0),
                            (false, false) => {
                                let xs: Vec<u32> = x.into_iter().collect();
                                let ys: Vec<u32> = y.into_iter().collect();
                                dense_divergence(&xs, &ys, 4)
                            }
                            _ => (1.0, 1.0),
                        };
                        sj += j; sd += d; sjsd += jsd; stv += tv;
                    }
                }
                let (j, d) = token_overlap(&a, &b).unwrap();
                let (jsd, tv) = token_divergence(&a, &b).unwrap();
                prop_assert!((j - sj / 12.0).abs() < 1e-12);
                prop_assert!((d - sd / 12.0).abs() < 1e-12);
                prop_assert!((jsd - sjsd / 12.0).abs() < 1e-12);
                prop_assert!((tv - stv / 12.0).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&jsd) && (0.0..=1.0).contains(&tv));
            }

            #[test]
            fn self_comparison_is_perfect(ea in edges()) {
                let a = trace(2, 6, &ea);
                let c = consistency(&a, &a).unwrap();
                prop_assert_eq!((c.weighted_jaccard, c.weighted_dice, c.jaccard, c.dice), (1.0, 1.0, 1.0, 1.0));
                prop_assert!(c.joint_jsd.abs() < 1e-12 && c.total_variation.abs() < 1e-12);
            }
        }
    }
}
