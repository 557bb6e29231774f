//! Exact dyadic-interval coding of expert selection patterns.
//!
//! A pattern `z in {0,1}^N` maps to the half-open interval
//! `[sum_t (1 - z_t) 2^-t, same + 2^-N)` inside `[0, 1)`. Any cutoff chosen
//! inside that interval is recovered, bit for bit, by a causal binary search
//! whose `t`-th query sits at the midpoint of the current bracket. All values
//! are dyadic rationals `m / 2^s` held with arbitrary-precision numerators.

use std::cmp::Ordering;
use std::fmt;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Result};

/// A binary selection pattern over `N >= 1` tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SelectionPattern(Vec<bool>);

impl SelectionPattern {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(invalid("selection pattern must have at least one token"));
        }
        Ok(Self(bits))
    }

    /// Parses a string of `0`/`1` characters.
    pub fn parse(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(invalid(format!("pattern character {other:?} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }

    /// The `n` low bits of `value`, most significant first.
    pub fn from_index(value: u64, n: usize) -> Result<Self> {
        Self::new((0..n).map(|t| (value >> (n - 1 - t)) & 1 == 1).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn count_selected(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

impl fmt::Display for SelectionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// The dyadic rational `numerator / 2^scale`, restricted to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct DyadicCutoff {
    numerator: BigUint,
    scale: u32,
}

impl DyadicCutoff {
    pub fn new(numerator: BigUint, scale: u32) -> Result<Self> {
        if numerator > (BigUint::one() << scale) {
            return Err(invalid(format!("{numerator}/2^{scale} exceeds 1")));
        }
        Ok(Self { numerator, scale })
    }

    pub fn from_u64(numerator: u64, scale: u32) -> Result<Self> {
        Self::new(BigUint::from(numerator), scale)
    }

    pub fn zero() -> Self {
        Self {
            numerator: BigUint::zero(),
            scale: 0,
        }
    }

    pub fn one() -> Self {
        Self {
            numerator: BigUint::one(),
            scale: 0,
        }
    }

    pub fn numerator(&self) -> &BigUint {
        &self.numerator
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    /// Numerator when expressed at `scale >= self.scale`.
    fn at_scale(&self, scale: u32) -> BigUint {
        debug_assert!(scale >= self.scale);
        &self.numerator << (scale - self.scale)
    }

    /// Nearest `f64`; lossy beyond 53 significant bits.
    pub fn to_f64(&self) -> f64 {
        let n = self.numerator.to_f64().unwrap_or(f64::INFINITY);
        n * 2f64.powi(-(self.scale as i32))
    }
}

impl PartialEq for DyadicCutoff {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for DyadicCutoff {}

impl PartialOrd for DyadicCutoff {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for DyadicCutoff {
    fn cmp(&self, other: &Self) -> Ordering {
        let s = self.scale.max(other.scale);
        self.at_scale(s).cmp(&other.at_scale(s))
    }
}

impl fmt::Display for DyadicCutoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/2^{}", self.numerator, self.scale)
    }
}

/// Half-open interval `[lower, upper)` with dyadic endpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DyadicInterval {
    pub lower: DyadicCutoff,
    pub upper: DyadicCutoff,
}

impl DyadicInterval {
    pub fn new(lower: DyadicCutoff, upper: DyadicCutoff) -> Result<Self> {
        if lower >= upper {
            return Err(invalid(format!("empty interval [{lower}, {upper})")));
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, c: &DyadicCutoff) -> bool {
        &self.lower <= c && c < &self.upper
    }

    pub fn contains_closed(&self, c: &DyadicCutoff) -> bool {
        &self.lower <= c && c <= &self.upper
    }

    /// Width as `(numerator, scale)`.
    pub fn width(&self) -> (BigUint, u32) {
        let s = self.lower.scale.max(self.upper.scale);
        (self.upper.at_scale(s) - self.lower.at_scale(s), s)
    }
}

impl fmt::Display for DyadicInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.lower, self.upper)
    }
}

/// Interval assigned to a pattern; patterns are ordered descending, so all
/// ones is leftmost and all zeros is rightmost.
pub fn encode_interval(z: &SelectionPattern) -> DyadicInterval {
    let n = z.len() as u32;
    let mut lower = BigUint::zero();
    for &bit in z.bits() {
        lower <<= 1u32;
        if !bit {
            lower += 1u32;
        }
    }
    let upper = &lower + 1u32;
    DyadicInterval {
        lower: DyadicCutoff { numerator: lower, scale: n },
        upper: DyadicCutoff { numerator: upper, scale: n },
    }
}

/// Midpoint of the interval, exact at one bit finer than its endpoints.
pub fn pick_cutoff(interval: &DyadicInterval) -> DyadicCutoff {
    let s = interval.lower.scale.max(interval.upper.scale);
    DyadicCutoff {
        numerator: interval.lower.at_scale(s) + interval.upper.at_scale(s),
        scale: s + 1,
    }
}

/// Binary-search decoding: bracket `[l, u) = [0, 1)`, query the midpoint
/// `r_t`, observe `z_t = 1{r_t >= c}`, and shrink the bracket toward `c`.
/// Returns the observed bits and the final bracket.
pub fn decode_pattern(c: &DyadicCutoff, n: usize) -> Result<(SelectionPattern, DyadicInterval)> {
    if n == 0 {
        return Err(invalid("decode horizon must be at least 1"));
    }
    if c > &DyadicCutoff::one() {
        return Err(invalid(format!("cutoff {c} outside [0, 1]")));
    }
    // Bracket numerators at the current scale t.
    let mut lower = BigUint::zero();
    let mut upper = BigUint::one();
    let mut bits = Vec::with_capacity(n);
    for t in 1..=n as u32 {
        let mid = &lower + &upper;
        let query = DyadicCutoff { numerator: mid.clone(), scale: t };
        let selected = &query >= c;
        if selected {
            lower <<= 1u32;
            upper = mid;
        } else {
            lower = mid;
            upper <<= 1u32;
        }
        bits.push(selected);
    }
    let scale = n as u32;
    Ok((
        SelectionPattern(bits),
        DyadicInterval {
            lower: DyadicCutoff { numerator: lower, scale },
            upper: DyadicCutoff { numerator: upper, scale },
        },
    ))
}

/// `log2 C(n, k)`: bits needed to single out one of all `k`-of-`n` selections.
///
/// # Panics
/// If `k > n`.
pub fn leakage_bits_lower(n: u64, k: u64) -> f64 {
    assert!(k <= n, "k = {k} exceeds n = {n}");
    if k == 0 || k == n {
        return 0.0;
    }
    let ln = ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0);
    (ln / std::f64::consts::LN_2).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakageBound {
    /// `layers * (G*E/N) * log2 C(N, N/E)` bits per token.
    pub per_token_bound: f64,
    /// `layers * G * log2(E - 1)` bits per token.
    pub closed_form_lower: f64,
}

/// Per-token EC leakage for a layer stack and its closed-form lower bound.
pub fn leakage_bits_per_token(n: u64, granularity: u64, expansion: u64, layers: u64) -> Result<LeakageBound> {
    if expansion < 2 {
        return Err(invalid("expansion must be at least 2"));
    }
    if n == 0 || n % expansion != 0 {
        return Err(invalid(format!("expansion {expansion} does not divide pool size {n}")));
    }
    let k = n / expansion;
    let per_layer = (granularity * expansion) as f64 / n as f64 * leakage_bits_lower(n, k);
    Ok(LeakageBound {
        per_token_bound: layers as f64 * per_layer,
        closed_form_lower: layers as f64 * granularity as f64 * ((expansion - 1) as f64).log2(),
    })
}

/// Exact integer check of `C(N, N/E) > (E - 1)^(N/E)`, which is the
/// per-token inequality with both sides multiplied out.
pub fn leakage_inequality_holds(n: u64, expansion: u64) -> Result<bool> {
    if expansion < 2 || n == 0 || n % expansion != 0 {
        return Err(invalid(format!("need E >= 2 dividing N, got N={n}, E={expansion}")));
    }
    let k = n / expansion;
    Ok(binomial(n, k) > BigUint::from(expansion - 1).pow(k as u32))
}

/// Exact binomial coefficient.
pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for j in 1..=k {
        acc = acc * BigUint::from(n - k + j) / BigUint::from(j);
    }
    acc
}

/// Number of distinct patterns decoded at horizon `n` from every cutoff
/// representable with `bits` bits, i.e. `j / 2^bits` for `j < 2^bits`.
pub fn distinct_quantized_patterns(bits: u32, n: usize) -> Result<usize> {
    let mut seen = std::collections::HashSet::new();
    for j in 0..(1u64 << bits) {
        let c = DyadicCutoff::from_u64(j, bits)?;
        seen.insert(decode_pattern(&c, n)?.0);
    }
    Ok(seen.len())
}
