//! Per-user quantification: prompts, scores, logits, mixture, decomposition, ranking.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ScoreBackend};
use crate::evaluation::final_ranking;
use crate::prompting::{
    logits_from_label_scores, sample_prompt_set, PromptError, PromptSample, PromptScheme, RankingInstance,
    TemplateSet, DEFAULT_FILL_MARGIN,
};
use crate::rng::SeedStream;
use crate::uncertainty::{decompose, DecomposeConfig, PromptMixture, UncertaintyError, UncertaintyReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("prompt {prompt_id}: {source}")]
    Backend {
        prompt_id: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
}

impl PipelineError {
    pub fn is_unreachable(&self) -> bool {
        matches!(self, PipelineError::Backend { source, .. } if source.is_unreachable())
    }
}

/// Everything `quantify_instance` needs besides the instance.
pub struct PipelineContext<'a> {
    pub scheme: PromptScheme,
    pub templates: &'a TemplateSet,
    pub backend: &'a dyn ScoreBackend,
    pub decompose: DecomposeConfig,
    pub fill_margin: f64,
    pub seed: u64,
}

impl<'a> PipelineContext<'a> {
    pub fn new(backend: &'a dyn ScoreBackend, templates: &'a TemplateSet, seed: u64) -> Self {
        Self {
            scheme: PromptScheme {
                seed,
                ..Default::default()
            },
            templates,
            backend,
            decompose: DecomposeConfig::default(),
            fill_margin: DEFAULT_FILL_MARGIN,
            seed,
        }
    }

    /// Same context with a different prompting scheme.
    pub fn with_scheme(&self, scheme: PromptScheme) -> Self {
        Self {
            scheme,
            templates: self.templates,
            backend: self.backend,
            decompose: self.decompose,
            fill_margin: self.fill_margin,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantifiedUser {
    pub user_id: String,
    pub report: UncertaintyReport,
    /// Candidate indices, best first.
    pub ranking: Vec<usize>,
    pub ranking_ids: Vec<String>,
    pub ground_truth_index: Option<usize>,
    pub prompt_ids: Vec<String>,
    /// Labels filled by the tail rule, per prompt.
    pub filled_labels: Vec<Vec<String>>,
    pub history_size: usize,
    pub candidate_count: usize,
    pub backend_calls: usize,
}

impl QuantifiedUser {
    pub fn any_filled(&self) -> bool {
        self.filled_labels.iter().any(|f| !f.is_empty())
    }
}

/// Renders the scheme's prompts for one instance.
pub fn prompts_for(instance: &RankingInstance, ctx: &PipelineContext<'_>) -> Result<Vec<PromptSample>, PipelineError> {
    Ok(sample_prompt_set(instance, &ctx.scheme, ctx.templates)?)
}

pub fn quantify_instance(instance: &RankingInstance, ctx: &PipelineContext<'_>) -> Result<QuantifiedUser, PipelineError> {
    let prompts = prompts_for(instance, ctx)?;
    let scores = ctx.backend.fetch_batch(&prompts);
    let mut logits = Vec::with_capacity(prompts.len());
    let mut filled_labels = Vec::with_capacity(prompts.len());
    for (prompt, s) in prompts.iter().zip(scores) {
        let s = s.map_err(|source| PipelineError::Backend {
            prompt_id: prompt.prompt_id.clone(),
            source,
        })?;
        let l = logits_from_label_scores(&s, prompt, ctx.fill_margin)?;
        if !l.filled_labels.is_empty() {
            tracing::warn!(
                user_id = %instance.user_id,
                prompt_id = %prompt.prompt_id,
                filled = l.filled_labels.len(),
                "labels missing from backend scores were filled"
            );
        }
        logits.push(l.logits);
        filled_labels.push(l.filled_labels);
    }
    let mix = PromptMixture::uniform(logits)?;
    let stream = SeedStream::new(ctx.seed).child(&instance.user_id).child("quantify");
    let report = decompose(&mix, &ctx.decompose, stream)?;
    let ranking = final_ranking(&mix);
    Ok(QuantifiedUser {
        user_id: instance.user_id.clone(),
        report,
        ranking_ids: ranking.iter().map(|&i| instance.candidates[i].id.clone()).collect(),
        ranking,
        ground_truth_index: instance.ground_truth_index(),
        prompt_ids: prompts.iter().map(|p| p.prompt_id.clone()).collect(),
        filled_labels,
        history_size: prompts.first().map_or(0, |p| p.applied_history.len()),
        candidate_count: instance.candidates.len(),
        backend_calls: prompts.len(),
    })
}

/// Quantifies every instance in parallel; results are sorted by user id.
pub fn quantify_all(
    instances: &[RankingInstance],
    ctx: &PipelineContext<'_>,
) -> Vec<(String, Result<QuantifiedUser, PipelineError>)> {
    let mut out: Vec<_> = instances
        .par_iter()
        .map(|inst| (inst.user_id.clone(), quantify_instance(inst, ctx)))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{SyntheticBackend, SyntheticConfig, SyntheticWorld, WorldSpec};
    use crate::uncertainty::EstimatorChoice;

    fn small_ctx<'a>(backend: &'a dyn ScoreBackend, templates: &'a TemplateSet) -> PipelineContext<'a> {
        let mut ctx = PipelineContext::new(backend, templates, 5);
        ctx.decompose.depth = 2;
        ctx.decompose.estimator = EstimatorChoice::Exact;
        ctx
    }

    #[test]
    fn quantify_is_deterministic_and_consistent() {
        let cfg = SyntheticConfig { seed: 1, ..Default::default() };
        let backend = SyntheticBackend::new(cfg.clone());
        let t = TemplateSet::builtin();
        let ctx = small_ctx(&backend, &t);
        let insts = SyntheticWorld::new(cfg).instances(&WorldSpec { users: 4, candidates: 6, history_length: 25 });
        let a = quantify_all(&insts, &ctx);
        let b = quantify_all(&insts, &ctx);
        assert_eq!(a.len(), 4);
        for ((_, x), (_, y)) in a.iter().zip(&b) {
            let (x, y) = (x.as_ref().unwrap(), y.as_ref().unwrap());
            assert_eq!(x, y);
            assert_eq!(x.backend_calls, 5);
            assert_eq!(x.history_size, 20);
            assert!((x.report.prompt_unc + x.report.recommendation_unc - x.report.total_unc).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_prompts_carry_no_prompt_uncertainty() {
        let cfg = SyntheticConfig {
            utility_noise_scale: 0.0,
            prompt_noise_scale: 0.0,
            ..Default::default()
        };
        let backend = SyntheticBackend::new(cfg.clone());
        let t = TemplateSet::builtin();
        let ctx = small_ctx(&backend, &t);
        for inst in SyntheticWorld::new(cfg).instances(&WorldSpec { users: 5, candidates: 7, history_length: 3 }) {
            let q = quantify_instance(&inst, &ctx).unwrap();
            assert!(q.report.prompt_unc.abs() < 1e-9);
            assert_eq!(q.ranking[0], q.ground_truth_index.unwrap());
        }
    }
}
