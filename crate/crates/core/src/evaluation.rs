//! Ranking quality and uncertainty-vs-quality correlation.
//!
//! The correlation statistics count ordered user pairs `(i, j)`, `i != j`:
//!
//! ```text
//! τ@K = 1/(n(n-1)) Σ sgn(Unc_j - Unc_i) · sgn(N_i - N_j)
//! C@K = 1/(n(n-1)) Σ 1(Unc_j - Unc_i) · 1(N_i - N_j)        (literal)
//! ```
//!
//! The literal concordance can never exceed 1/2 because a pair and its
//! reverse cannot both count, so a normalized variant is reported as C@K:
//! over pairs whose NDCG differs, the fraction where the better user has the
//! lower uncertainty, with uncertainty ties counting one half.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::uncertainty::{PromptMixture, UncertaintyReport};

/// Default cutoffs for NDCG and the correlation metrics.
pub const DEFAULT_KS: [usize; 2] = [10, 20];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("correlation needs at least 2 users, got {0}")]
    TooFewRecords(usize),
    #[error("records mix cutoffs or measures ({0})")]
    MixedRecords(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no ground truth recorded for user {0}")]
    MissingGroundTruth(String),
}

/// Which uncertainty score a record carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Total,
    Recommendation,
    Prompt,
    /// Negated label-probability confidence.
    LabelProbability,
    SemanticUncertainty,
}

impl Measure {
    pub const ALL: [Measure; 5] = [
        Measure::Total,
        Measure::Recommendation,
        Measure::Prompt,
        Measure::LabelProbability,
        Measure::SemanticUncertainty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Total => "total",
            Measure::Recommendation => "recommendation",
            Measure::Prompt => "prompt",
            Measure::LabelProbability => "label_probability",
            Measure::SemanticUncertainty => "semantic_uncertainty",
        }
    }

    /// Uncertainty value under this measure, if the report carries it.
    pub fn extract(self, report: &UncertaintyReport) -> Option<f64> {
        match self {
            Measure::Total => Some(report.total_unc),
            Measure::Recommendation => Some(report.recommendation_unc),
            Measure::Prompt => Some(report.prompt_unc),
            Measure::LabelProbability => Some(-report.baseline_label_prob),
            Measure::SemanticUncertainty => report.baseline_semantic_unc,
        }
    }
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub user_id: String,
    pub measure: Measure,
    pub uncertainty: f64,
    pub ndcg_at_k: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub measure: Measure,
    pub k: usize,
    pub n_users: usize,
    pub tau_at_k: f64,
    /// Normalized concordance.
    pub c_at_k: f64,
    pub c_at_k_literal: f64,
    pub mean_ndcg: f64,
    /// Fraction of ordered pairs tied on NDCG (these contribute 0 to τ).
    pub ndcg_tie_fraction: f64,
}

/// Candidates ordered by mean top-1 probability across prompts, best first.
pub fn final_ranking(mix: &PromptMixture) -> Vec<usize> {
    let mean = mix.mean_softmax();
    let mut order: Vec<usize> = (0..mean.len()).collect();
    order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
    order
}

/// Single-relevant-item NDCG: `1/log2(1 + rank)` when the item ranks within `k`.
///
/// `ground_truth` is a candidate index; `None` (item not among the candidates) scores 0.
pub fn ndcg_at_k(ranking: &[usize], ground_truth: Option<usize>, k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let Some(gt) = ground_truth else {
        return Ok(0.0);
    };
    Ok(match ranking.iter().position(|&c| c == gt) {
        Some(pos) if pos < k => 1.0 / ((pos + 2) as f64).log2(),
        _ => 0.0,
    })
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Step function with the midpoint convention `1(0) = 1/2`.
fn step(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        0.0
    } else {
        0.5
    }
}

fn check_records(records: &[EvalRecord]) -> Result<(), EvalError> {
    if records.len() < 2 {
        return Err(EvalError::TooFewRecords(records.len()));
    }
    let (k, m) = (records[0].k, records[0].measure);
    if let Some(r) = records.iter().find(|r| r.k != k || r.measure != m) {
        return Err(EvalError::MixedRecords(format!(
            "{m}@{k} vs {}@{}",
            r.measure, r.k
        )));
    }
    Ok(())
}

/// Pair-count reductions, each in a fixed summation order.
struct PairCounts {
    tau: f64,
    literal: f64,
    concordant: f64,
    comparable: f64,
    ndcg_ties: f64,
}

fn count_pairs(records: &[EvalRecord]) -> PairCounts {
    let mut c = PairCounts {
        tau: 0.0,
        literal: 0.0,
        concordant: 0.0,
        comparable: 0.0,
        ndcg_ties: 0.0,
    };
    for (i, a) in records.iter().enumerate() {
        for (j, b) in records.iter().enumerate() {
            if i == j {
                continue;
            }
            let du = b.uncertainty - a.uncertainty;
            let dn = a.ndcg_at_k - b.ndcg_at_k;
            c.tau += sgn(du) * sgn(dn);
            c.literal += step(du) * step(dn);
            if dn > 0.0 {
                c.comparable += 1.0;
                c.concordant += step(du);
            } else if dn == 0.0 {
                c.ndcg_ties += 1.0;
            }
        }
    }
    c
}

fn ordered_pairs(n: usize) -> f64 {
    (n * (n - 1)) as f64
}

/// Kendall-style τ between low uncertainty and high NDCG, without tie correction.
pub fn kendall_tau_at_k(records: &[EvalRecord]) -> Result<f64, EvalError> {
    check_records(records)?;
    Ok(count_pairs(records).tau / ordered_pairs(records.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concordance {
    pub normalized: f64,
    pub literal: f64,
}

/// Concordance index; when every NDCG ties the normalized value is 1/2.
pub fn concordance_index_at_k(records: &[EvalRecord]) -> Result<Concordance, EvalError> {
    check_records(records)?;
    let c = count_pairs(records);
    Ok(Concordance {
        normalized: if c.comparable > 0.0 {
            c.concordant / c.comparable
        } else {
            0.5
        },
        literal: c.literal / ordered_pairs(records.len()),
    })
}

pub fn summarize(records: &[EvalRecord]) -> Result<EvalSummary, EvalError> {
    check_records(records)?;
    let n = records.len();
    let c = count_pairs(records);
    let pairs = ordered_pairs(n);
    if c.comparable == 0.0 {
        tracing::warn!(
            measure = %records[0].measure,
            k = records[0].k,
            "every user has the same NDCG; correlations are undefined and reported as ties"
        );
    }
    Ok(EvalSummary {
        measure: records[0].measure,
        k: records[0].k,
        n_users: n,
        tau_at_k: c.tau / pairs,
        c_at_k: if c.comparable > 0.0 {
            c.concordant / c.comparable
        } else {
            0.5
        },
        c_at_k_literal: c.literal / pairs,
        mean_ndcg: records.iter().map(|r| r.ndcg_at_k).sum::<f64>() / n as f64,
        ndcg_tie_fraction: c.ndcg_ties / pairs,
    })
}

/// One user's quantified output joined with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredUser<'a> {
    pub user_id: &'a str,
    pub report: &'a UncertaintyReport,
    pub ranking: &'a [usize],
    pub ground_truth: Option<usize>,
}

/// Records for every (measure, k) pair, grouped in the given order.
pub fn build_records(
    users: &[ScoredUser<'_>],
    ks: &[usize],
    measures: &[Measure],
) -> Result<Vec<Vec<EvalRecord>>, EvalError> {
    let mut groups = Vec::new();
    for &measure in measures {
        for &k in ks {
            let mut group = Vec::with_capacity(users.len());
            for u in users {
                let Some(uncertainty) = measure.extract(u.report) else {
                    continue;
                };
                group.push(EvalRecord {
                    user_id: u.user_id.to_string(),
                    measure,
                    uncertainty,
                    ndcg_at_k: ndcg_at_k(u.ranking, u.ground_truth, k)?,
                    k,
                });
            }
            groups.push(group);
        }
    }
    Ok(groups)
}

/// Summaries for each measure and cutoff, measures outermost.
pub fn evaluate_run(
    users: &[ScoredUser<'_>],
    ks: &[usize],
    measures: &[Measure],
) -> Result<Vec<EvalSummary>, EvalError> {
    build_records(users, ks, measures)?
        .iter()
        .map(|g| summarize(g))
        .collect()
}
