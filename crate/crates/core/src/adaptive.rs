//! Per-user prompt adaptation: retry the most uncertain users with other history
//! sizes or candidate counts and keep the least uncertain variant.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{ndcg_at_k, EvalError};
use crate::pipeline::{quantify_all, quantify_instance, PipelineContext, PipelineError, QuantifiedUser};
use crate::prompting::{RankingInstance, SchemeVariant, DEFAULT_HISTORY_SIZES};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid adaptation policy: {0}")]
    Policy(String),
    #[error("default variant failed for {user_id}: {source}")]
    Default {
        user_id: String,
        #[source]
        source: PipelineError,
    },
    #[error("no user could be quantified")]
    NoUsers,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptTarget {
    History,
    Candidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    RecommendationUnc,
    PromptUncProportion,
    TotalUnc,
}

impl SelectionMetric {
    pub fn of(self, q: &QuantifiedUser) -> f64 {
        match self {
            SelectionMetric::RecommendationUnc => q.report.recommendation_unc,
            SelectionMetric::PromptUncProportion => q.report.prompt_unc_proportion,
            SelectionMetric::TotalUnc => q.report.total_unc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationPolicy {
    pub target: AdaptTarget,
    #[serde(default = "default_pool")]
    pub variant_pool: Vec<usize>,
    /// Defaults to recommendation uncertainty for history and the prompt
    /// uncertainty proportion for candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_metric: Option<SelectionMetric>,
    #[serde(default = "default_trigger")]
    pub trigger: f64,
    /// Defaults to the scheme's history limit, or the instance's full candidate set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_size: Option<usize>,
}

fn default_pool() -> Vec<usize> {
    DEFAULT_HISTORY_SIZES.to_vec()
}

fn default_trigger() -> f64 {
    0.05
}

impl AdaptationPolicy {
    pub fn new(target: AdaptTarget) -> Self {
        Self {
            target,
            variant_pool: default_pool(),
            selection_metric: None,
            trigger: default_trigger(),
            default_size: None,
        }
    }

    pub fn metric(&self) -> SelectionMetric {
        self.selection_metric.unwrap_or(match self.target {
            AdaptTarget::History => SelectionMetric::RecommendationUnc,
            AdaptTarget::Candidates => SelectionMetric::PromptUncProportion,
        })
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        if self.variant_pool.is_empty() {
            return Err(AdaptError::Policy("variant_pool is empty".into()));
        }
        if self.variant_pool.contains(&0) {
            return Err(AdaptError::Policy("variant sizes must be positive".into()));
        }
        if !(self.trigger > 0.0 && self.trigger <= 1.0) {
            return Err(AdaptError::Policy(format!("trigger {} outside (0, 1]", self.trigger)));
        }
        Ok(())
    }

    fn default_for(&self, instance: &RankingInstance, ctx: &PipelineContext<'_>) -> usize {
        self.default_size.unwrap_or(match self.target {
            AdaptTarget::History => ctx.scheme.history_limit,
            AdaptTarget::Candidates => instance.candidates.len(),
        })
    }
}

/// Quantifies `instance` with one variant size applied.
pub fn run_variant(
    instance: &RankingInstance,
    target: AdaptTarget,
    size: usize,
    ctx: &PipelineContext<'_>,
) -> Result<QuantifiedUser, PipelineError> {
    match target {
        AdaptTarget::History => {
            let mut scheme = ctx.scheme.clone();
            scheme.history_limit = size;
            if scheme.variant == SchemeVariant::VaryHistorySize {
                scheme.history_sizes = vec![size];
            }
            quantify_instance(instance, &ctx.with_scheme(scheme))
        }
        AdaptTarget::Candidates => quantify_instance(&instance.with_candidate_limit(size), ctx),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub default_size: usize,
    pub chosen_size: usize,
    pub default_metric: f64,
    pub chosen_metric: f64,
    pub default: QuantifiedUser,
    pub chosen: QuantifiedUser,
    pub variants_evaluated: usize,
    pub backend_calls: usize,
}

fn select_from_default(
    instance: &RankingInstance,
    policy: &AdaptationPolicy,
    ctx: &PipelineContext<'_>,
    default: QuantifiedUser,
) -> Selection {
    let metric = policy.metric();
    let default_size = policy.default_for(instance, ctx);
    let default_metric = metric.of(&default);
    let mut best: Option<(usize, f64, QuantifiedUser)> = None;
    let mut evaluated = 1;
    let mut calls = default.backend_calls;
    for &size in &policy.variant_pool {
        if size == default_size {
            continue;
        }
        match run_variant(instance, policy.target, size, ctx) {
            Ok(q) => {
                evaluated += 1;
                calls += q.backend_calls;
                let m = metric.of(&q);
                let incumbent = best.as_ref().map_or(default_metric, |b| b.1);
                if m < incumbent {
                    best = Some((size, m, q));
                }
            }
            Err(e) => tracing::warn!(user_id = %instance.user_id, size, error = %e, "variant skipped"),
        }
    }
    let (chosen_size, chosen_metric, chosen) = best.unwrap_or_else(|| (default_size, default_metric, default.clone()));
    Selection {
        default_size,
        chosen_size,
        default_metric,
        chosen_metric,
        default,
        chosen,
        variants_evaluated: evaluated,
        backend_calls: calls,
    }
}

/// Runs every pool variant and keeps the one minimizing the policy metric.
///
/// The default size is always evaluated and wins ties; failed variants are
/// skipped with a warning.
pub fn select_variant(
    instance: &RankingInstance,
    policy: &AdaptationPolicy,
    ctx: &PipelineContext<'_>,
) -> Result<Selection, AdaptError> {
    policy.validate()?;
    let size = policy.default_for(instance, ctx);
    let default = run_variant(instance, policy.target, size, ctx).map_err(|source| AdaptError::Default {
        user_id: instance.user_id.clone(),
        source,
    })?;
    Ok(select_from_default(instance, policy, ctx, default))
}

/// One user's metrics under a variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub size: usize,
    pub ndcg: f64,
    pub total_unc: f64,
    pub recommendation_unc: f64,
    pub prompt_unc: f64,
    pub prompt_unc_proportion: f64,
    pub metric: f64,
}

impl Snapshot {
    fn of(q: &QuantifiedUser, size: usize, metric: SelectionMetric, k: usize) -> Result<Self, EvalError> {
        Ok(Self {
            size,
            ndcg: ndcg_at_k(&q.ranking, q.ground_truth_index, k)?,
            total_unc: q.report.total_unc,
            recommendation_unc: q.report.recommendation_unc,
            prompt_unc: q.report.prompt_unc,
            prompt_unc_proportion: q.report.prompt_unc_proportion,
            metric: metric.of(q),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub user_id: String,
    pub before: Snapshot,
    pub after: Snapshot,
}

/// Cohort means for one side of the study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub ndcg: f64,
    pub total_unc: f64,
    pub recommendation_unc: f64,
    pub prompt_unc: f64,
    pub prompt_unc_proportion: f64,
    pub metric: f64,
    pub avg_size: f64,
}

impl CohortSummary {
    pub fn from_snapshots<'a>(snaps: impl IntoIterator<Item = &'a Snapshot>) -> Self {
        let mut s = Self {
            ndcg: 0.0,
            total_unc: 0.0,
            recommendation_unc: 0.0,
            prompt_unc: 0.0,
            prompt_unc_proportion: 0.0,
            metric: 0.0,
            avg_size: 0.0,
        };
        let mut n = 0usize;
        for x in snaps {
            n += 1;
            s.ndcg += x.ndcg;
            s.total_unc += x.total_unc;
            s.recommendation_unc += x.recommendation_unc;
            s.prompt_unc += x.prompt_unc;
            s.prompt_unc_proportion += x.prompt_unc_proportion;
            s.metric += x.metric;
            s.avg_size += x.size as f64;
        }
        if n > 0 {
            let n = n as f64;
            for v in [
                &mut s.ndcg,
                &mut s.total_unc,
                &mut s.recommendation_unc,
                &mut s.prompt_unc,
                &mut s.prompt_unc_proportion,
                &mut s.metric,
                &mut s.avg_size,
            ] {
                *v /= n;
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveStudy {
    pub policy: AdaptationPolicy,
    pub metric: SelectionMetric,
    pub k: usize,
    pub n_users: usize,
    pub n_triggered: usize,
    pub n_failed: usize,
    pub before: CohortSummary,
    pub after: CohortSummary,
    /// Backend calls for the triggered cohort under the default variant only.
    pub baseline_backend_calls: usize,
    /// Backend calls for the triggered cohort across all evaluated variants.
    pub adaptive_backend_calls: usize,
    pub rows: Vec<StudyRow>,
}

/// Applies the policy to the `trigger` fraction of users with the highest
/// metric under the default variant and reports the cohort before and after.
pub fn run_adaptive_study(
    instances: &[RankingInstance],
    policy: &AdaptationPolicy,
    ctx: &PipelineContext<'_>,
    k: usize,
) -> Result<AdaptiveStudy, AdaptError> {
    policy.validate()?;
    let metric = policy.metric();
    let default_ctx;
    let base_ctx = match (policy.target, policy.default_size) {
        (AdaptTarget::History, Some(size)) => {
            let mut scheme = ctx.scheme.clone();
            scheme.history_limit = size;
            if scheme.variant == SchemeVariant::VaryHistorySize {
                scheme.history_sizes = vec![size];
            }
            default_ctx = ctx.with_scheme(scheme);
            &default_ctx
        }
        _ => ctx,
    };
    let baseline_inputs: Vec<RankingInstance> = match (policy.target, policy.default_size) {
        (AdaptTarget::Candidates, Some(size)) => instances.iter().map(|i| i.with_candidate_limit(size)).collect(),
        _ => instances.to_vec(),
    };

    let mut n_failed = 0;
    let mut baseline = Vec::new();
    for (user_id, r) in quantify_all(&baseline_inputs, base_ctx) {
        match r {
            Ok(q) => baseline.push(q),
            Err(e) => {
                n_failed += 1;
                tracing::warn!(%user_id, error = %e, "user skipped");
            }
        }
    }
    if baseline.is_empty() {
        return Err(AdaptError::NoUsers);
    }

    let n_triggered = ((policy.trigger * baseline.len() as f64).ceil() as usize).clamp(1, baseline.len());
    let mut order: Vec<usize> = (0..baseline.len()).collect();
    order.sort_by(|&a, &b| {
        metric
            .of(&baseline[b])
            .total_cmp(&metric.of(&baseline[a]))
            .then_with(|| baseline[a].user_id.cmp(&baseline[b].user_id))
    });
    let mut triggered: Vec<usize> = order[..n_triggered].to_vec();
    triggered.sort_by(|&a, &b| baseline[a].user_id.cmp(&baseline[b].user_id));

    let by_id: std::collections::HashMap<&str, &RankingInstance> =
        instances.iter().map(|i| (i.user_id.as_str(), i)).collect();
    let selections: Vec<Selection> = triggered
        .par_iter()
        .map(|&ix| {
            let q = &baseline[ix];
            select_from_default(by_id[q.user_id.as_str()], policy, ctx, q.clone())
        })
        .collect();

    let mut rows = Vec::with_capacity(selections.len());
    for s in &selections {
        let before_size = effective_size(policy.target, &s.default);
        let after_size = effective_size(policy.target, &s.chosen);
        rows.push(StudyRow {
            user_id: s.default.user_id.clone(),
            before: Snapshot::of(&s.default, before_size, metric, k)?,
            after: Snapshot::of(&s.chosen, after_size, metric, k)?,
        });
    }
    Ok(AdaptiveStudy {
        policy: policy.clone(),
        metric,
        k,
        n_users: baseline.len(),
        n_triggered,
        n_failed,
        before: CohortSummary::from_snapshots(rows.iter().map(|r| &r.before)),
        after: CohortSummary::from_snapshots(rows.iter().map(|r| &r.after)),
        baseline_backend_calls: selections.iter().map(|s| s.default.backend_calls).sum(),
        adaptive_backend_calls: selections.iter().map(|s| s.backend_calls).sum(),
        rows,
    })
}

/// Size actually used: applied history length or candidate count.
fn effective_size(target: AdaptTarget, q: &QuantifiedUser) -> usize {
    match target {
        AdaptTarget::History => q.history_size,
        AdaptTarget::Candidates => q.candidate_count,
    }
}
