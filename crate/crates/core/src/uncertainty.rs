//! Predictive uncertainty of a prompt mixture and its decomposition.
//!
//! The predictive distribution over ranking prefixes is the weighted mixture
//! of the per-prompt Plackett-Luce distributions. Its entropy (total
//! uncertainty) splits exactly into
//!
//! ```text
//! H[q(π)] = I[P; π] + E_P H[q(π | P)]
//!  total  = prompt  + recommendation
//! ```
//!
//! Both sides are estimated either by exhaustive enumeration (small prefix
//! spaces) or by Monte Carlo with reported standard errors.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pl::{
    check_cap, check_depth, for_each_prefix, gumbel_top_k, prefix_space_size,
    LogitVector, PlError, PlModel, RankingPrefix, DEFAULT_DEPTH, DEFAULT_ENUMERATION_CAP,
};
use crate::rng::SeedStream;

/// Default Monte-Carlo draws, both for total entropy and per prompt.
pub const DEFAULT_MC_SAMPLES: usize = 10_000;

/// Default answers sampled per prompt for the semantic-uncertainty baseline.
pub const DEFAULT_SEMANTIC_DRAWS: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UncertaintyError {
    #[error(transparent)]
    Pl(#[from] PlError),
    #[error("a prompt mixture needs at least one prompt")]
    EmptyMixture,
    #[error("prompt {prompt} has {found} candidates, expected {expected}")]
    CandidateCountMismatch {
        prompt: usize,
        expected: usize,
        found: usize,
    },
    #[error("prompt weights must be non-negative, one per prompt, and sum to 1 (got {0:?})")]
    InvalidWeights(Vec<f64>),
    #[error("Monte-Carlo estimation needs at least one sample")]
    ZeroSamples,
}

/// Per-prompt logits with the probability of each prompt under the prompting scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMixture {
    per_prompt_logits: Vec<LogitVector>,
    prompt_weights: Vec<f64>,
}

impl PromptMixture {
    /// Mixture with uniform weights over the sampled prompts.
    pub fn uniform(per_prompt_logits: Vec<LogitVector>) -> Result<Self, UncertaintyError> {
        let m = per_prompt_logits.len();
        Self::weighted(per_prompt_logits, vec![1.0 / m.max(1) as f64; m])
    }

    pub fn weighted(
        per_prompt_logits: Vec<LogitVector>,
        prompt_weights: Vec<f64>,
    ) -> Result<Self, UncertaintyError> {
        let Some(first) = per_prompt_logits.first() else {
            return Err(UncertaintyError::EmptyMixture);
        };
        let expected = first.candidate_count();
        for (prompt, l) in per_prompt_logits.iter().enumerate() {
            if l.candidate_count() != expected {
                return Err(UncertaintyError::CandidateCountMismatch {
                    prompt,
                    expected,
                    found: l.candidate_count(),
                });
            }
        }
        let sum: f64 = prompt_weights.iter().sum();
        if prompt_weights.len() != per_prompt_logits.len()
            || prompt_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(UncertaintyError::InvalidWeights(prompt_weights));
        }
        Ok(Self {
            per_prompt_logits,
            prompt_weights,
        })
    }

    pub fn candidate_count(&self) -> usize {
        self.per_prompt_logits[0].candidate_count()
    }

    pub fn prompt_count(&self) -> usize {
        self.per_prompt_logits.len()
    }

    pub fn logits(&self) -> &[LogitVector] {
        &self.per_prompt_logits
    }

    pub fn weights(&self) -> &[f64] {
        &self.prompt_weights
    }

    /// Mean top-1 probability per candidate, `E_P[q(i | P)]`.
    pub fn mean_softmax(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.candidate_count()];
        for (l, w) in self.per_prompt_logits.iter().zip(&self.prompt_weights) {
            for (m, p) in mean.iter_mut().zip(l.softmax()) {
                *m += w * p;
            }
        }
        mean
    }

    /// Applies the same candidate relabeling to every prompt.
    pub fn permuted(&self, relabel: &[usize]) -> Result<Self, UncertaintyError> {
        let logits = self
            .per_prompt_logits
            .iter()
            .map(|l| l.permuted(relabel))
            .collect::<Result<Vec<_>, _>>()?;
        Self::weighted(logits, self.prompt_weights.clone())
    }

    fn model(&self) -> MixtureModel {
        MixtureModel {
            prompts: self.per_prompt_logits.iter().map(PlModel::new).collect(),
            log_weights: self.prompt_weights.iter().map(|w| w.ln()).collect(),
        }
    }
}

struct MixtureModel {
    prompts: Vec<PlModel>,
    log_weights: Vec<f64>,
}

impl MixtureModel {
    /// Mixture log-probability; leaves each prompt's log-probability in `per_prompt`.
    fn log_prob_with(&self, items: &[usize], per_prompt: &mut [f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for ((slot, m), lw) in per_prompt.iter_mut().zip(&self.prompts).zip(&self.log_weights) {
            *slot = m.log_prob_unchecked(items);
            max = max.max(*slot + lw);
        }
        if !max.is_finite() {
            return max;
        }
        let sum: f64 = per_prompt
            .iter()
            .zip(&self.log_weights)
            .map(|(lp, lw)| (lp + lw - max).exp())
            .sum();
        max + sum.ln()
    }
}

pub fn mixture_log_prob(mix: &PromptMixture, prefix: &RankingPrefix) -> Result<f64, UncertaintyError> {
    let n = mix.candidate_count();
    let checked = RankingPrefix::new(prefix.items().to_vec(), n)?;
    let mut scratch = vec![0.0; mix.prompt_count()];
    Ok(mix.model().log_prob_with(checked.items(), &mut scratch))
}

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Variance of the sample mean.
    fn mean_variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64 / self.n as f64
        }
    }

    fn estimate(&self) -> McEstimate {
        McEstimate {
            mean: self.mean,
            std_error: self.mean_variance().sqrt(),
            samples: self.n,
        }
    }
}

/// Monte-Carlo entropy of the mixture: pick a prompt by weight, draw a prefix
/// from it, and average `-log q̂(prefix)` under the full mixture.
pub fn total_uncertainty<R: Rng + ?Sized>(
    mix: &PromptMixture,
    depth: usize,
    mc_samples: usize,
    rng: &mut R,
) -> Result<McEstimate, UncertaintyError> {
    check_depth(depth, mix.candidate_count())?;
    if mc_samples == 0 {
        return Err(UncertaintyError::ZeroSamples);
    }
    let model = mix.model();
    let picker = WeightedIndex::new(mix.weights())
        .map_err(|_| UncertaintyError::InvalidWeights(mix.weights().to_vec()))?;
    let mut scratch = vec![0.0; mix.prompt_count()];
    let mut items = Vec::with_capacity(depth);
    let mut acc = Welford::default();
    for _ in 0..mc_samples {
        let n = picker.sample(rng);
        model.prompts[n].sample_into(depth, rng, &mut items);
        acc.push(-model.log_prob_with(&items, &mut scratch));
    }
    Ok(acc.estimate())
}

/// Entropy of the mixture by summing over every prefix.
pub fn exact_total_uncertainty(
    mix: &PromptMixture,
    depth: usize,
    cap: u64,
) -> Result<f64, UncertaintyError> {
    Ok(exact_terms(mix, depth, cap)?.0)
}

/// Monte-Carlo entropy of a single prompt's prefix distribution.
pub fn conditional_entropy<R: Rng + ?Sized>(
    logits: &LogitVector,
    depth: usize,
    mc_samples: usize,
    rng: &mut R,
) -> Result<McEstimate, UncertaintyError> {
    check_depth(depth, logits.candidate_count())?;
    if mc_samples == 0 {
        return Err(UncertaintyError::ZeroSamples);
    }
    let model = PlModel::new(logits);
    let mut items = Vec::with_capacity(depth);
    let mut acc = Welford::default();
    for _ in 0..mc_samples {
        model.sample_into(depth, rng, &mut items);
        acc.push(-model.log_prob_unchecked(&items));
    }
    Ok(acc.estimate())
}

pub fn exact_conditional_entropy(
    logits: &LogitVector,
    depth: usize,
    cap: u64,
) -> Result<f64, UncertaintyError> {
    Ok(crate::pl::enumerate_prefix_distribution(logits, depth, cap)?.entropy())
}

/// (total, per-prompt conditional entropies) by enumeration.
fn exact_terms(
    mix: &PromptMixture,
    depth: usize,
    cap: u64,
) -> Result<(f64, Vec<f64>), UncertaintyError> {
    let n = mix.candidate_count();
    check_depth(depth, n)?;
    check_cap(n, depth, cap)?;
    let model = mix.model();
    let mut scratch = vec![0.0; mix.prompt_count()];
    let mut total = 0.0;
    let mut conditional = vec![0.0; mix.prompt_count()];
    for_each_prefix(n, depth, |items| {
        let lp = model.log_prob_with(items, &mut scratch);
        total += neg_p_log_p(lp);
        for (h, &lp_n) in conditional.iter_mut().zip(scratch.iter()) {
            *h += neg_p_log_p(lp_n);
        }
    });
    Ok((total, conditional))
}

fn neg_p_log_p(lp: f64) -> f64 {
    if lp.is_finite() {
        -lp.exp() * lp
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Exact,
    MonteCarlo,
}

/// How `decompose` picks its estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorChoice {
    /// Enumerate when the prefix space fits under the cap, else Monte Carlo.
    #[default]
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecomposeConfig {
    pub depth: usize,
    pub mc_samples: usize,
    pub estimator: EstimatorChoice,
    pub enumeration_cap: u64,
    /// Answers per prompt for the semantic baseline; `None` skips it.
    pub semantic_draws: Option<usize>,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            depth: DEFAULT_DEPTH,
            mc_samples: DEFAULT_MC_SAMPLES,
            estimator: EstimatorChoice::Auto,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            semantic_draws: Some(DEFAULT_SEMANTIC_DRAWS),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub total_unc: f64,
    pub recommendation_unc: f64,
    /// Raw estimate; may dip below zero under Monte Carlo.
    pub prompt_unc: f64,
    pub prompt_unc_proportion: f64,
    pub per_prompt_conditional_entropy: Vec<f64>,
    pub mc_samples: usize,
    pub truncation_depth: usize,
    pub estimator: Estimator,
    pub baseline_label_prob: f64,
    pub baseline_semantic_unc: Option<f64>,
    pub total_unc_se: f64,
    pub recommendation_unc_se: f64,
    pub prompt_unc_se: f64,
    /// `max(prompt_unc, 0)`, for human-readable summaries.
    pub prompt_unc_clamped: f64,
}

impl UncertaintyReport {
    fn from_terms(
        estimator: Estimator,
        depth: usize,
        mc_samples: usize,
        total: (f64, f64),
        recommendation: (f64, f64),
        prompt_se: f64,
        per_prompt: Vec<f64>,
    ) -> Self {
        let prompt_unc = total.0 - recommendation.0;
        Self {
            total_unc: total.0,
            recommendation_unc: recommendation.0,
            prompt_unc,
            prompt_unc_proportion: if total.0 > 0.0 { prompt_unc / total.0 } else { 0.0 },
            per_prompt_conditional_entropy: per_prompt,
            mc_samples,
            truncation_depth: depth,
            estimator,
            baseline_label_prob: 0.0,
            baseline_semantic_unc: None,
            total_unc_se: total.1,
            recommendation_unc_se: recommendation.1,
            prompt_unc_se: prompt_se,
            prompt_unc_clamped: prompt_unc.max(0.0),
        }
    }
}

/// Splits the total predictive uncertainty into prompt and recommendation parts.
///
/// The truncation depth is clamped to the candidate count. Under Monte Carlo
/// each prompt contributes `mc_samples` prefixes drawn from its own
/// distribution; every draw is scored under both the prompt and the mixture,
/// so the prompt term is estimated from paired differences.
pub fn decompose(
    mix: &PromptMixture,
    cfg: &DecomposeConfig,
    stream: SeedStream,
) -> Result<UncertaintyReport, UncertaintyError> {
    let n = mix.candidate_count();
    let depth = cfg.depth.min(n);
    check_depth(depth, n)?;
    let fits = prefix_space_size(n, depth).is_some_and(|s| s <= cfg.enumeration_cap);
    let use_exact = match cfg.estimator {
        EstimatorChoice::Exact => true,
        EstimatorChoice::MonteCarlo => false,
        EstimatorChoice::Auto => fits,
    };

    let mut report = if use_exact {
        let (total, per_prompt) = exact_terms(mix, depth, cfg.enumeration_cap)?;
        let rec = weighted_mean(mix.weights(), &per_prompt);
        UncertaintyReport::from_terms(
            Estimator::Exact,
            depth,
            0,
            (total, 0.0),
            (rec, 0.0),
            0.0,
            per_prompt,
        )
    } else {
        paired_monte_carlo(mix, depth, cfg.mc_samples, stream.child("decompose"))?
    };

    report.baseline_label_prob = label_probability_baseline(mix);
    if let Some(draws) = cfg.semantic_draws {
        let mut rng = stream.child("semantic").rng();
        report.baseline_semantic_unc = Some(semantic_uncertainty_baseline(mix, draws, &mut rng)?);
    }
    Ok(report)
}

fn weighted_mean(weights: &[f64], values: &[f64]) -> f64 {
    weights.iter().zip(values).map(|(w, v)| w * v).sum()
}

fn paired_monte_carlo(
    mix: &PromptMixture,
    depth: usize,
    mc_samples: usize,
    stream: SeedStream,
) -> Result<UncertaintyReport, UncertaintyError> {
    if mc_samples == 0 {
        return Err(UncertaintyError::ZeroSamples);
    }
    let model = mix.model();
    let mut scratch = vec![0.0; mix.prompt_count()];
    let mut items = Vec::with_capacity(depth);
    let (mut total, mut total_var) = (0.0, 0.0);
    let (mut rec, mut rec_var) = (0.0, 0.0);
    let mut diff_var = 0.0;
    let mut per_prompt = Vec::with_capacity(mix.prompt_count());

    for (idx, (pl, &w)) in model.prompts.iter().zip(mix.weights()).enumerate() {
        let mut rng = stream.index(idx as u64).rng();
        let (mut cross, mut own, mut diff) = (Welford::default(), Welford::default(), Welford::default());
        for _ in 0..mc_samples {
            pl.sample_into(depth, &mut rng, &mut items);
            let lp_mix = model.log_prob_with(&items, &mut scratch);
            let lp_own = scratch[idx];
            cross.push(-lp_mix);
            own.push(-lp_own);
            diff.push(lp_own - lp_mix);
        }
        per_prompt.push(own.mean);
        total += w * cross.mean;
        total_var += w * w * cross.mean_variance();
        rec += w * own.mean;
        rec_var += w * w * own.mean_variance();
        diff_var += w * w * diff.mean_variance();
    }

    Ok(UncertaintyReport::from_terms(
        Estimator::MonteCarlo,
        depth,
        mc_samples,
        (total, total_var.sqrt()),
        (rec, rec_var.sqrt()),
        diff_var.sqrt(),
        per_prompt,
    ))
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Confidence of the final top-1 item: its mean softmax probability across prompts.
///
/// The top item is chosen by the averaged probability, the same rule that
/// produces the final ranking. Use the negated value as an uncertainty.
pub fn label_probability_baseline(mix: &PromptMixture) -> f64 {
    let mean = mix.mean_softmax();
    mean[argmax(&mean)]
}

/// Entropy of top-1 answers sampled from each prompt and pooled across prompts.
pub fn semantic_uncertainty_baseline<R: Rng + ?Sized>(
    mix: &PromptMixture,
    draws_per_prompt: usize,
    rng: &mut R,
) -> Result<f64, UncertaintyError> {
    if draws_per_prompt == 0 {
        return Err(UncertaintyError::ZeroSamples);
    }
    let mut pooled = vec![0.0; mix.candidate_count()];
    let mut winner = Vec::with_capacity(1);
    for (l, w) in mix.logits().iter().zip(mix.weights()) {
        let share = w / draws_per_prompt as f64;
        for _ in 0..draws_per_prompt {
            gumbel_top_k(l.values(), 1, rng, &mut winner);
            pooled[winner[0]] += share;
        }
    }
    Ok(pooled.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum::<f64>().max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    fn mix(prompts: &[&[f64]]) -> PromptMixture {
        PromptMixture::uniform(prompts.iter().map(|p| lv(p)).collect()).unwrap()
    }

    fn prefix(items: &[usize], n: usize) -> RankingPrefix {
        RankingPrefix::new(items.to_vec(), n).unwrap()
    }

    fn mc_cfg(samples: usize) -> DecomposeConfig {
        DecomposeConfig {
            depth: 2,
            mc_samples: samples,
            estimator: EstimatorChoice::MonteCarlo,
            ..Default::default()
        }
    }

    #[test]
    fn mixture_validation() {
        assert_eq!(PromptMixture::uniform(vec![]), Err(UncertaintyError::EmptyMixture));
        assert!(matches!(
            PromptMixture::uniform(vec![lv(&[0.0, 1.0]), lv(&[0.0])]),
            Err(UncertaintyError::CandidateCountMismatch { prompt: 1, .. })
        ));
        assert!(matches!(
            PromptMixture::weighted(vec![lv(&[0.0, 1.0])], vec![0.5]),
            Err(UncertaintyError::InvalidWeights(_))
        ));
    }

    #[test]
    fn degenerate_mixtures_match_single_prompt() {
        let z = [0.3, -1.0, 2.0, 0.5];
        let p = prefix(&[2, 0], 4);
        let single = crate::pl::pl_log_prob(&lv(&z), &p).unwrap();
        assert_eq!(mixture_log_prob(&mix(&[&z]), &p).unwrap(), single);
        assert_abs_diff_eq!(mixture_log_prob(&mix(&[&z, &z]), &p).unwrap(), single, epsilon = 1e-14);
    }

    #[test]
    fn disjoint_one_hot_mixture_is_a_coin() {
        let m = mix(&[&[50.0, 0.0], &[0.0, 50.0]]);
        assert_abs_diff_eq!(mixture_log_prob(&m, &prefix(&[0], 2)).unwrap(), 0.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn total_uncertainty_anchors() {
        let mut rng = SeedStream::new(1).rng();
        let det = total_uncertainty(&mix(&[&[50.0, 0.0, 0.0]]), 1, 2000, &mut rng).unwrap();
        assert!(det.mean.abs() < 1e-15);

        let uni = total_uncertainty(&mix(&[&[0.0; 4]]), 4, 5000, &mut rng).unwrap();
        // Every permutation has the same probability, so the estimator has no variance.
        assert_abs_diff_eq!(uni.mean, 24f64.ln(), epsilon = 1e-9);

        let coin = total_uncertainty(&mix(&[&[50.0, 0.0], &[0.0, 50.0]]), 1, 5000, &mut rng).unwrap();
        assert_abs_diff_eq!(coin.mean, 2f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn exact_total_anchors() {
        let u = [0.7; 3];
        assert_abs_diff_eq!(
            exact_total_uncertainty(&mix(&[&u, &u]), 3, DEFAULT_ENUMERATION_CAP).unwrap(),
            6f64.ln(),
            epsilon = 1e-12
        );
        assert!(matches!(
            exact_total_uncertainty(&mix(&[&[0.0; 20]]), 10, DEFAULT_ENUMERATION_CAP),
            Err(UncertaintyError::Pl(PlError::CapExceeded { .. }))
        ));
    }

    #[test]
    fn mc_total_converges_to_exact() {
        let m = mix(&[&[0.2, 1.1, -0.5, 0.0], &[1.5, -0.3, 0.4, 0.2], &[-1.0, 0.0, 0.9, 2.2]]);
        let exact = exact_total_uncertainty(&m, 2, DEFAULT_ENUMERATION_CAP).unwrap();
        let mut rng = SeedStream::new(5).rng();
        let est = total_uncertainty(&m, 2, 50_000, &mut rng).unwrap();
        assert!((est.mean - exact).abs() <= 3.0 * est.std_error, "{est:?} vs {exact}");
    }

    #[test]
    fn mc_error_shrinks_with_samples() {
        let m = mix(&[&[0.2, 1.1, -0.5, 0.0, 0.3], &[1.5, -0.3, 0.4, 0.2, -2.0]]);
        let exact = exact_total_uncertainty(&m, 3, DEFAULT_ENUMERATION_CAP).unwrap();
        // Mean absolute error over independent streams at each budget.
        let rmse = |samples: usize| -> f64 {
            let reps = 20;
            let sq: f64 = (0..reps)
                .map(|r| {
                    let mut rng = SeedStream::new(77).index(samples as u64).index(r).rng();
                    let e = total_uncertainty(&m, 3, samples, &mut rng).unwrap().mean - exact;
                    e * e
                })
                .sum();
            (sq / reps as f64).sqrt()
        };
        let (e1, e2, e3) = (rmse(1_000), rmse(10_000), rmse(100_000));
        assert!(e2 < e1 && e3 < e2, "{e1} {e2} {e3}");
        // 1/sqrt(N) scaling within generous slack.
        assert!(e1 / e3 > 3.0, "{e1} {e3}");
    }

    #[test]
    fn conditional_entropy_anchors() {
        let mut rng = SeedStream::new(2).rng();
        assert!(conditional_entropy(&lv(&[60.0, 0.0, 0.0]), 1, 1000, &mut rng).unwrap().mean < 1e-20);
        assert_abs_diff_eq!(
            conditional_entropy(&lv(&[0.0; 4]), 1, 1000, &mut rng).unwrap().mean,
            4f64.ln(),
            epsilon = 1e-12
        );
        let z = lv(&[4f64.ln(), 3f64.ln(), 2f64.ln(), 0.0]);
        let exact = exact_conditional_entropy(&z, 2, DEFAULT_ENUMERATION_CAP).unwrap();
        let est = conditional_entropy(&z, 2, 20_000, &mut rng).unwrap();
        assert!((est.mean - exact).abs() <= 3.0 * est.std_error);
    }

    #[test]
    fn exact_conditional_entropy_by_hand() {
        // Top-2 prefixes of softmax(4,3,2,1)/10, written out explicitly.
        let p = [0.4, 0.3, 0.2, 0.1];
        let mut h = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    let q = p[i] * p[j] / (1.0 - p[i]);
                    h -= q * f64::ln(q);
                }
            }
        }
        let z = lv(&[4f64.ln(), 3f64.ln(), 2f64.ln(), 0.0]);
        assert_abs_diff_eq!(exact_conditional_entropy(&z, 2, 1000).unwrap(), h, epsilon = 1e-12);
    }

    #[test]
    fn decompose_identical_prompts_has_no_prompt_uncertainty() {
        let z = [0.1, 0.9, -0.4, 0.3];
        let m = mix(&[&z, &z, &z]);
        let exact = decompose(&m, &DecomposeConfig { depth: 2, ..Default::default() }, SeedStream::new(0)).unwrap();
        assert_eq!(exact.estimator, Estimator::Exact);
        assert!(exact.prompt_unc.abs() < 1e-12);
        let mc = decompose(&m, &mc_cfg(5000), SeedStream::new(0)).unwrap();
        assert!(mc.prompt_unc.abs() <= 2.0 * mc.prompt_unc_se + 1e-12);
    }

    #[test]
    fn decompose_disjoint_one_hots() {
        let m = mix(&[&[50.0, 0.0], &[0.0, 50.0]]);
        let cfg = DecomposeConfig { depth: 1, ..Default::default() };
        let r = decompose(&m, &cfg, SeedStream::new(0)).unwrap();
        assert!(r.recommendation_unc < 1e-15);
        assert_abs_diff_eq!(r.prompt_unc, 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.total_unc, 2f64.ln(), epsilon = 1e-12);
        assert_eq!(r.baseline_label_prob, 0.5);
    }

    #[test]
    fn decompose_mc_matches_exact() {
        let m = mix(&[&[0.2, 1.1, -0.5, 0.0], &[1.5, -0.3, 0.4, 0.2], &[-1.0, 0.0, 0.9, 2.2]]);
        let exact = decompose(&m, &DecomposeConfig { depth: 2, ..Default::default() }, SeedStream::new(3)).unwrap();
        let mc = decompose(&m, &mc_cfg(20_000), SeedStream::new(3)).unwrap();
        assert_eq!(mc.estimator, Estimator::MonteCarlo);
        assert!((mc.total_unc - exact.total_unc).abs() <= 3.0 * mc.total_unc_se);
        assert!((mc.recommendation_unc - exact.recommendation_unc).abs() <= 3.0 * mc.recommendation_unc_se);
        assert!((mc.prompt_unc - exact.prompt_unc).abs() <= 3.0 * mc.prompt_unc_se);
        assert_eq!(mc.prompt_unc, mc.total_unc - mc.recommendation_unc);
    }

    #[test]
    fn depth_is_clamped_to_candidates() {
        let r = decompose(&mix(&[&[0.0, 1.0, 2.0]]), &DecomposeConfig::default(), SeedStream::new(0)).unwrap();
        assert_eq!(r.truncation_depth, 3);
    }

    #[test]
    fn label_probability_examples() {
        assert!(label_probability_baseline(&mix(&[&[50.0, 0.0]])) > 1.0 - 1e-15);
        let m = mix(&[&[0.6f64.ln(), 0.4f64.ln()], &[0.8f64.ln(), 0.2f64.ln()]]);
        assert_abs_diff_eq!(label_probability_baseline(&m), 0.7, epsilon = 1e-15);
    }

    #[test]
    fn semantic_uncertainty_examples() {
        let mut rng = SeedStream::new(4).rng();
        assert_eq!(semantic_uncertainty_baseline(&mix(&[&[80.0, 0.0, 0.0]]), 25, &mut rng).unwrap(), 0.0);
        // One-hot prompts on two different items, equal draws each.
        let split = semantic_uncertainty_baseline(&mix(&[&[80.0, 0.0], &[0.0, 80.0]]), 5, &mut rng).unwrap();
        assert_abs_diff_eq!(split, 2f64.ln(), epsilon = 1e-12);
        let probs = [0.5f64, 0.3, 0.2];
        let z: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let h: f64 = probs.iter().map(|p| -p * p.ln()).sum();
        let est = semantic_uncertainty_baseline(&mix(&[&z]), 10_000, &mut rng).unwrap();
        assert!((est - h).abs() <= 0.02);
    }

    fn small_mixture() -> impl Strategy<Value = (PromptMixture, usize)> {
        (3usize..=5, 1usize..=4, 1usize..=3).prop_flat_map(|(n, m, depth)| {
            (prop::collection::vec(prop::collection::vec(-3.0f64..3.0, n), m), Just(depth))
                .prop_map(|(rows, depth)| {
                    (PromptMixture::uniform(rows.into_iter().map(|r| lv(&r)).collect()).unwrap(), depth)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn exact_decomposition_is_nonnegative((m, depth) in small_mixture()) {
            let cfg = DecomposeConfig { depth, semantic_draws: None, ..Default::default() };
            let r = decompose(&m, &cfg, SeedStream::new(0)).unwrap();
            prop_assert!(r.prompt_unc >= -1e-9);
            prop_assert!(r.total_unc >= r.recommendation_unc - 1e-9);
            prop_assert_eq!(r.prompt_unc, r.total_unc - r.recommendation_unc);
        }

        #[test]
        fn relabeling_and_shift_leave_report_unchanged((m, depth) in small_mixture(), shift in -20.0f64..20.0, rot in 1usize..5) {
            let cfg = DecomposeConfig { depth, semantic_draws: None, ..Default::default() };
            let base = decompose(&m, &cfg, SeedStream::new(0)).unwrap();
            let n = m.candidate_count();
            let relabel: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let relabeled = decompose(&m.permuted(&relabel).unwrap(), &cfg, SeedStream::new(0)).unwrap();
            let mut logits = m.logits().to_vec();
            logits[0] = logits[0].shifted(shift).unwrap();
            let shifted = decompose(&PromptMixture::uniform(logits).unwrap(), &cfg, SeedStream::new(0)).unwrap();
            for other in [&relabeled, &shifted] {
                prop_assert!((other.total_unc - base.total_unc).abs() < 1e-9);
                prop_assert!((other.recommendation_unc - base.recommendation_unc).abs() < 1e-9);
                prop_assert!((other.baseline_label_prob - base.baseline_label_prob).abs() < 1e-12);
                for (a, b) in other.per_prompt_conditional_entropy.iter().zip(&base.per_prompt_conditional_entropy) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }
}
