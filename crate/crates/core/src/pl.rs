//! Plackett-Luce distributions over truncated rankings.
//!
//! A prompt yields one logit per candidate. The probability of a ranking
//! prefix `(π_1, ..., π_K)` is the product of sequential softmaxes, each taken
//! over the candidates not yet placed:
//!
//! ```text
//! log q(π) = Σ_k [ z_{π_k} - logsumexp(z_l : l not in π_1..π_{k-1}) ]
//! ```
//!
//! Everything is evaluated in the log domain. Sampling uses the Gumbel
//! top-K construction: perturb every logit with independent standard Gumbel
//! noise and keep the K largest perturbed values, which is distributed
//! exactly as sequential sampling without replacement.

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest prefix space materialized by exact enumeration unless overridden.
pub const DEFAULT_ENUMERATION_CAP: u64 = 100_000;

/// Default truncation depth.
pub const DEFAULT_DEPTH: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlError {
    #[error("logit vector must contain at least one candidate")]
    Empty,
    #[error("logit for candidate {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("candidate index {index} out of range for {candidate_count} candidates")]
    DimensionMismatch {
        index: usize,
        candidate_count: usize,
    },
    #[error("candidate {0} appears more than once in the prefix")]
    DuplicateIndex(usize),
    #[error("depth {depth} is outside 1..={candidate_count}")]
    InvalidDepth { depth: usize, candidate_count: usize },
    #[error("prefix space {} exceeds the enumeration cap {cap}", size.map_or_else(|| "(overflow)".to_string(), |s| s.to_string()))]
    CapExceeded { size: Option<u64>, cap: u64 },
}

/// Per-candidate logits for one prompt, indexed by canonical candidate index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LogitVector {
    values: Vec<f64>,
}

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, PlError> {
        if values.is_empty() {
            return Err(PlError::Empty);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(PlError::NonFinite { index, value });
        }
        Ok(Self { values })
    }

    pub fn candidate_count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn log_sum_exp(&self) -> f64 {
        log_sum_exp(&self.values)
    }

    /// Top-1 softmax probabilities.
    pub fn softmax(&self) -> Vec<f64> {
        let lse = self.log_sum_exp();
        self.values.iter().map(|z| (z - lse).exp()).collect()
    }

    /// Same logits with `c` added to every entry.
    pub fn shifted(&self, c: f64) -> Result<Self, PlError> {
        Self::new(self.values.iter().map(|z| z + c).collect())
    }

    /// Relabels candidates: entry `i` of the result is entry `relabel[i]` of `self`.
    pub fn permuted(&self, relabel: &[usize]) -> Result<Self, PlError> {
        let n = self.candidate_count();
        if relabel.len() != n {
            return Err(PlError::DimensionMismatch {
                index: relabel.len(),
                candidate_count: n,
            });
        }
        let mut out = Vec::with_capacity(n);
        for &src in relabel {
            let z = *self.values.get(src).ok_or(PlError::DimensionMismatch {
                index: src,
                candidate_count: n,
            })?;
            out.push(z);
        }
        Self::new(out)
    }
}

impl TryFrom<Vec<f64>> for LogitVector {
    type Error = PlError;
    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<LogitVector> for Vec<f64> {
    fn from(v: LogitVector) -> Self {
        v.values
    }
}

/// Ordered head of a ranking: distinct candidate indices, best first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankingPrefix {
    items: Vec<usize>,
}

impl RankingPrefix {
    /// Validates the prefix against `candidate_count`.
    pub fn new(items: Vec<usize>, candidate_count: usize) -> Result<Self, PlError> {
        validate_prefix(&items, candidate_count)?;
        Ok(Self { items })
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn depth(&self) -> usize {
        self.items.len()
    }
}

fn validate_prefix(items: &[usize], candidate_count: usize) -> Result<(), PlError> {
    if items.is_empty() || items.len() > candidate_count {
        return Err(PlError::InvalidDepth {
            depth: items.len(),
            candidate_count,
        });
    }
    let mut seen = vec![false; candidate_count];
    for &i in items {
        if i >= candidate_count {
            return Err(PlError::DimensionMismatch {
                index: i,
                candidate_count,
            });
        }
        if seen[i] {
            return Err(PlError::DuplicateIndex(i));
        }
        seen[i] = true;
    }
    Ok(())
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-probability of `prefix` under the Plackett-Luce model with `logits`.
pub fn pl_log_prob(logits: &LogitVector, prefix: &RankingPrefix) -> Result<f64, PlError> {
    validate_prefix(prefix.items(), logits.candidate_count())?;
    Ok(PlModel::new(logits).log_prob_unchecked(prefix.items()))
}

/// Precomputed Plackett-Luce evaluator for repeated scoring of one logit vector.
#[derive(Debug, Clone)]
pub struct PlModel {
    logits: Vec<f64>,
    max: f64,
    /// `exp(z_i - max)`
    weights: Vec<f64>,
    total: f64,
}

impl PlModel {
    pub fn new(logits: &LogitVector) -> Self {
        let max = logits.max();
        let weights: Vec<f64> = logits.values().iter().map(|z| (z - max).exp()).collect();
        let total = weights.iter().sum();
        Self {
            logits: logits.values().to_vec(),
            max,
            weights,
            total,
        }
    }

    pub fn candidate_count(&self) -> usize {
        self.logits.len()
    }

    /// Log-probability of a prefix assumed valid for this model.
    pub fn log_prob_unchecked(&self, items: &[usize]) -> f64 {
        let mut remaining = self.total;
        let mut lp = 0.0;
        // Denominators are multiplied together and logged in batches.
        let mut prod = 1.0;
        for (k, &c) in items.iter().enumerate() {
            if k > 0 {
                let prev = self.weights[items[k - 1]];
                // Subtracting a dominant weight loses precision; resum instead.
                remaining = if prev <= 0.5 * remaining {
                    remaining - prev
                } else {
                    self.remaining_sum(&items[..k])
                };
            }
            if remaining > 1e-250 {
                lp += self.logits[c] - self.max;
                prod *= remaining;
                if !(1e-30..=1e30).contains(&prod) {
                    lp -= prod.ln();
                    prod = 1.0;
                }
            } else {
                lp += self.logits[c] - self.remaining_log_sum_exp(&items[..k]);
            }
        }
        lp - prod.ln()
    }

    fn remaining_sum(&self, placed: &[usize]) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .filter(|(i, _)| !placed.contains(i))
            .map(|(_, w)| w)
            .sum()
    }

    fn remaining_log_sum_exp(&self, placed: &[usize]) -> f64 {
        let rest: Vec<f64> = self
            .logits
            .iter()
            .enumerate()
            .filter(|(i, _)| !placed.contains(i))
            .map(|(_, &z)| z)
            .collect();
        log_sum_exp(&rest)
    }

    /// Draws a prefix of length `depth` by Gumbel top-K.
    ///
    /// Ranks by `-ln(u) / w`, which orders items exactly as the Gumbel keys
    /// `z - ln(-ln u)` built from the same uniforms.
    pub fn sample_into<R: Rng + ?Sized>(&self, depth: usize, rng: &mut R, out: &mut Vec<usize>) {
        if self.weights.iter().any(|&w| w < 1e-300) {
            gumbel_top_k(&self.logits, depth, rng, out);
            return;
        }
        let mut keys: Vec<(f64, usize)> = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let u: f64 = rng.sample(Open01);
                (-u.ln() / w, i)
            })
            .collect();
        let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if depth < keys.len() {
            keys.select_nth_unstable_by(depth, by_key);
            keys.truncate(depth);
        }
        keys.sort_unstable_by(by_key);
        out.clear();
        out.extend(keys.iter().map(|&(_, i)| i));
    }
}

pub(crate) fn gumbel_top_k<R: Rng + ?Sized>(
    logits: &[f64],
    depth: usize,
    rng: &mut R,
    out: &mut Vec<usize>,
) {
    let mut perturbed: Vec<(f64, usize)> = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let u: f64 = rng.sample(Open01);
            (z - (-u.ln()).ln(), i)
        })
        .collect();
    let by_value = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if depth < perturbed.len() {
        perturbed.select_nth_unstable_by(depth, by_value);
        perturbed.truncate(depth);
    }
    perturbed.sort_unstable_by(by_value);
    out.clear();
    out.extend(perturbed.iter().map(|&(_, i)| i));
}

/// Draws one prefix from the Plackett-Luce distribution of `logits`.
pub fn sample_prefix<R: Rng + ?Sized>(
    logits: &LogitVector,
    depth: usize,
    rng: &mut R,
) -> Result<RankingPrefix, PlError> {
    check_depth(depth, logits.candidate_count())?;
    let mut items = Vec::with_capacity(depth);
    gumbel_top_k(logits.values(), depth, rng, &mut items);
    Ok(RankingPrefix { items })
}

pub(crate) fn check_depth(depth: usize, candidate_count: usize) -> Result<(), PlError> {
    if depth == 0 || depth > candidate_count {
        return Err(PlError::InvalidDepth {
            depth,
            candidate_count,
        });
    }
    Ok(())
}

/// Number of ordered prefixes of length `depth`, `n!/(n-depth)!`, or `None` on overflow.
pub fn prefix_space_size(candidate_count: usize, depth: usize) -> Option<u64> {
    if depth > candidate_count {
        return Some(0);
    }
    let mut size: u64 = 1;
    for j in 0..depth {
        size = size.checked_mul((candidate_count - j) as u64)?;
    }
    Some(size)
}

pub(crate) fn check_cap(candidate_count: usize, depth: usize, cap: u64) -> Result<u64, PlError> {
    match prefix_space_size(candidate_count, depth) {
        Some(size) if size <= cap => Ok(size),
        size => Err(PlError::CapExceeded { size, cap }),
    }
}

/// Calls `f` on every ordered prefix of length `depth`, in lexicographic order.
pub fn for_each_prefix(candidate_count: usize, depth: usize, mut f: impl FnMut(&[usize])) {
    fn walk(n: usize, depth: usize, used: &mut [bool], cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if cur.len() == depth {
            f(cur);
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                walk(n, depth, used, cur, f);
                cur.pop();
                used[i] = false;
            }
        }
    }
    if depth == 0 || depth > candidate_count {
        return;
    }
    let mut used = vec![false; candidate_count];
    let mut cur = Vec::with_capacity(depth);
    walk(candidate_count, depth, &mut used, &mut cur, &mut f);
}

/// Exhaustive table of prefix log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrefixDistribution {
    pub candidate_count: usize,
    pub depth: usize,
    entries: Vec<(RankingPrefix, f64)>,
}

impl PrefixDistribution {
    pub fn entries(&self) -> &[(RankingPrefix, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn log_prob(&self, prefix: &RankingPrefix) -> Option<f64> {
        self.entries
            .binary_search_by(|(p, _)| p.cmp(prefix))
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn total_probability(&self) -> f64 {
        self.entries.iter().map(|(_, lp)| lp.exp()).sum()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, lp)| if lp.is_finite() { -lp.exp() * lp } else { 0.0 })
            .sum()
    }
}

pub fn enumerate_prefix_distribution(
    logits: &LogitVector,
    depth: usize,
    cap: u64,
) -> Result<PrefixDistribution, PlError> {
    let n = logits.candidate_count();
    check_depth(depth, n)?;
    let size = check_cap(n, depth, cap)?;
    let model = PlModel::new(logits);
    let mut entries = Vec::with_capacity(size as usize);
    for_each_prefix(n, depth, |items| {
        entries.push((
            RankingPrefix {
                items: items.to_vec(),
            },
            model.log_prob_unchecked(items),
        ));
    });
    Ok(PrefixDistribution {
        candidate_count: n,
        depth,
        entries,
    })
}
