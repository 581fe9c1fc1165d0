//! Batch commands behind the `rankunc` binary.
//!
//! Every command reads one JSON `RunConfig`, writes its artifacts under
//! `output_dir`, and stamps each file with the config fingerprint and seed.
//! Outputs contain no timestamps or host details, so identical inputs give
//! byte-identical files.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive::{run_adaptive_study, AdaptError, AdaptTarget, AdaptationPolicy, AdaptiveStudy};
use crate::backends::{record_label_scores, BackendConfig, BackendError, ScoreBackend, StoredScores, SyntheticWorld, WorldSpec};
use crate::evaluation::{build_records, summarize, EvalError, EvalRecord, EvalSummary, Measure, ScoredUser, DEFAULT_KS};
use crate::pipeline::{prompts_for, quantify_all, PipelineContext, QuantifiedUser};
use crate::pl::{DEFAULT_DEPTH, DEFAULT_ENUMERATION_CAP};
use crate::prompting::{PromptScheme, RankingInstance, TemplateSet, DEFAULT_FILL_MARGIN};
use crate::uncertainty::{DecomposeConfig, EstimatorChoice, UncertaintyReport, DEFAULT_MC_SAMPLES, DEFAULT_SEMANTIC_DRAWS};

pub const REPORTS_FILE: &str = "reports.jsonl";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SCATTER_CSV: &str = "scatter.csv";
pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const STUDY_JSON: &str = "study.json";
pub const STUDY_CSV: &str = "study.csv";
pub const STUDY_USERS_CSV: &str = "study_users.csv";

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{failed} of {total} users failed, above the allowed fraction {threshold}")]
    PartialFailure { failed: usize, total: usize, threshold: f64 },
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
}

impl CommandError {
    /// Process exit code: 1 config, 2 partial failure, 3 backend unreachable.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::PartialFailure { .. } => 2,
            CommandError::BackendUnreachable(_) => 3,
            CommandError::Adapt(AdaptError::Default { source, .. }) if source.is_unreachable() => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |source| CommandError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn backend_err(e: BackendError) -> CommandError {
    if e.is_unreachable() {
        CommandError::BackendUnreachable(e.to_string())
    } else {
        CommandError::Config(e.to_string())
    }
}

fn default_depth() -> usize {
    DEFAULT_DEPTH
}
fn default_mc_samples() -> usize {
    DEFAULT_MC_SAMPLES
}
fn default_cap() -> u64 {
    DEFAULT_ENUMERATION_CAP
}
fn default_semantic() -> Option<usize> {
    Some(DEFAULT_SEMANTIC_DRAWS)
}
fn default_ks() -> Vec<usize> {
    DEFAULT_KS.to_vec()
}
fn default_measures() -> Vec<Measure> {
    Measure::ALL.to_vec()
}
fn default_fill() -> f64 {
    DEFAULT_FILL_MARGIN
}
fn default_threshold() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// JSONL of ranking instances; `simulate` generates its own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances_path: Option<PathBuf>,
    #[serde(default)]
    pub scheme: PromptScheme,
    pub backend: BackendConfig,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub estimator: EstimatorChoice,
    #[serde(default = "default_cap")]
    pub enumeration_cap: u64,
    #[serde(default = "default_semantic")]
    pub semantic_draws: Option<usize>,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "default_measures")]
    pub measures: Vec<Measure>,
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptation: Option<AdaptationPolicy>,
    #[serde(default = "default_fill")]
    pub fill_margin: f64,
    /// Worker threads; all cores when unset. Does not affect results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    /// Largest tolerated fraction of failed users.
    #[serde(default = "default_threshold")]
    pub failure_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    /// Population generated by `simulate`.
    #[serde(default)]
    pub world: WorldSpec,
    /// Logit store written by `fetch-logits`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_path: Option<PathBuf>,
    /// Reports read by `evaluate`; defaults to `output_dir/reports.jsonl`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reports_path: Option<PathBuf>,
}

/// Command-line values that replace config keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub backend: Option<BackendConfig>,
    pub ks: Option<Vec<usize>>,
    pub mc_samples: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CommandError> {
        serde_json::from_str(text).map_err(|e| CommandError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CommandError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| CommandError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(j) = o.jobs {
            self.jobs = Some(j);
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(b) = &o.backend {
            self.backend = b.clone();
        }
        if let Some(k) = &o.ks {
            self.ks = k.clone();
        }
        if let Some(m) = o.mc_samples {
            self.mc_samples = m;
        }
        self
    }

    pub fn validate(&self) -> Result<(), CommandError> {
        let bad = |m: &str| Err(CommandError::Config(m.to_string()));
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks must be a nonempty list of positive cutoffs");
        }
        if self.measures.is_empty() {
            return bad("measures is empty");
        }
        if !(self.fill_margin.is_finite() && self.fill_margin >= 0.0) {
            return bad("fill_margin must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            return bad("failure_threshold must be in [0, 1]");
        }
        if self.jobs == Some(0) {
            return bad("jobs must be at least 1");
        }
        self.scheme.validate().map_err(|e| CommandError::Config(e.to_string()))?;
        self.backend.validate().map_err(backend_err)?;
        if let Some(p) = &self.adaptation {
            p.validate()?;
        }
        Ok(())
    }

    /// Digest of every setting that can change results.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.jobs = None;
        c.reports_path = None;
        crate::fingerprint(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn decompose_config(&self) -> DecomposeConfig {
        DecomposeConfig {
            depth: self.depth,
            mc_samples: self.mc_samples,
            estimator: self.estimator,
            enumeration_cap: self.enumeration_cap,
            semantic_draws: self.semantic_draws,
        }
    }

    fn scheme(&self) -> PromptScheme {
        PromptScheme {
            seed: self.seed,
            ..self.scheme.clone()
        }
    }

    fn templates(&self) -> Result<TemplateSet, CommandError> {
        match &self.templates_dir {
            Some(d) => TemplateSet::load_dir(d).map_err(|e| CommandError::Config(e.to_string())),
            None => Ok(TemplateSet::builtin()),
        }
    }

    fn context<'a>(&self, backend: &'a dyn ScoreBackend, templates: &'a TemplateSet) -> PipelineContext<'a> {
        PipelineContext {
            scheme: self.scheme(),
            templates,
            backend,
            decompose: self.decompose_config(),
            fill_margin: self.fill_margin,
            seed: self.seed,
        }
    }

    fn output_path(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    fn prepare_output(&self) -> Result<(), CommandError> {
        std::fs::create_dir_all(&self.output_dir).map_err(io_err(&self.output_dir))
    }

    fn run_in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T, CommandError> {
        match self.jobs {
            None => Ok(f()),
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map(|pool| pool.install(f))
                .map_err(|e| CommandError::Config(format!("thread pool: {e}"))),
        }
    }
}

/// Reads ranking instances, one JSON object per line.
pub fn load_instances(path: &Path) -> Result<Vec<RankingInstance>, CommandError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out: Vec<RankingInstance> = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: RankingInstance = serde_json::from_str(&line)
            .map_err(|e| CommandError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if !ids.insert(inst.user_id.clone()) {
            return Err(CommandError::Config(format!("{}:{}: duplicate user_id {:?}", path.display(), i + 1, inst.user_id)));
        }
        out.push(inst);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CommandError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|e| io_err(path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CommandError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path)(e.into()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CommandError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path)(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path)(e.into()))?;
    }
    w.flush().map_err(io_err(path))
}

/// One line of `reports.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub user_id: String,
    pub config_fingerprint: String,
    pub seed: u64,
    pub backend: String,
    pub report: UncertaintyReport,
    /// Candidate ids, best first.
    pub ranking: Vec<String>,
    pub ranking_indices: Vec<usize>,
    pub ground_truth: Option<String>,
    pub ground_truth_index: Option<usize>,
    pub prompt_ids: Vec<String>,
    pub filled_labels: bool,
}

impl ReportLine {
    fn new(q: &QuantifiedUser, inst: &RankingInstance, fingerprint: &str, seed: u64, backend: &str) -> Self {
        Self {
            user_id: q.user_id.clone(),
            config_fingerprint: fingerprint.to_string(),
            seed,
            backend: backend.to_string(),
            report: q.report.clone(),
            ranking: q.ranking_ids.clone(),
            ranking_indices: q.ranking.clone(),
            ground_truth: inst.ground_truth.clone(),
            ground_truth_index: q.ground_truth_index,
            prompt_ids: q.prompt_ids.clone(),
            filled_labels: q.any_filled(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedUser {
    pub user_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_fingerprint: String,
    pub seed: u64,
    pub backend: String,
    pub n_instances: usize,
    pub n_succeeded: usize,
    pub failures: Vec<FailedUser>,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantifyOutcome {
    pub lines: Vec<ReportLine>,
    pub failures: Vec<FailedUser>,
    pub reports_path: PathBuf,
}

fn failure_check(cfg: &RunConfig, failed: usize, total: usize, any_unreachable: bool) -> Result<(), CommandError> {
    if total > 0 && failed as f64 > cfg.failure_threshold * total as f64 {
        if any_unreachable {
            return Err(CommandError::BackendUnreachable(format!("{failed} of {total} users could not reach the backend")));
        }
        return Err(CommandError::PartialFailure {
            failed,
            total,
            threshold: cfg.failure_threshold,
        });
    }
    Ok(())
}

fn quantify_instances(
    cfg: &RunConfig,
    command: &str,
    instances: &[RankingInstance],
    backend: &dyn ScoreBackend,
) -> Result<QuantifyOutcome, CommandError> {
    let templates = cfg.templates()?;
    let ctx = cfg.context(backend, &templates);
    let fingerprint = cfg.fingerprint();
    let backend_id = backend.fingerprint();
    let results = cfg.run_in_pool(|| quantify_all(instances, &ctx))?;

    let by_id: std::collections::HashMap<&str, &RankingInstance> =
        instances.iter().map(|i| (i.user_id.as_str(), i)).collect();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    let mut any_unreachable = false;
    for (user_id, r) in results {
        match r {
            Ok(q) => lines.push(ReportLine::new(&q, by_id[user_id.as_str()], &fingerprint, cfg.seed, &backend_id)),
            Err(e) => {
                tracing::error!(%user_id, error = %e, "user failed");
                any_unreachable |= e.is_unreachable();
                failures.push(FailedUser {
                    user_id,
                    error: e.to_string(),
                });
            }
        }
    }

    cfg.prepare_output()?;
    let reports_path = cfg.output_path(REPORTS_FILE);
    write_jsonl(&reports_path, &lines)?;
    write_json(
        &cfg.output_path(MANIFEST_FILE),
        &RunManifest {
            command: command.to_string(),
            config_fingerprint: fingerprint,
            seed: cfg.seed,
            backend: backend_id,
            n_instances: instances.len(),
            n_succeeded: lines.len(),
            failures: failures.clone(),
            config: cfg.clone(),
        },
    )?;
    tracing::info!(succeeded = lines.len(), failed = failures.len(), path = %reports_path.display(), "reports written");
    failure_check(cfg, failures.len(), instances.len(), any_unreachable)?;
    Ok(QuantifyOutcome {
        lines,
        failures,
        reports_path,
    })
}

fn required_instances(cfg: &RunConfig) -> Result<Vec<RankingInstance>, CommandError> {
    let path = cfg
        .instances_path
        .as_ref()
        .ok_or_else(|| CommandError::Config("instances_path is required".into()))?;
    if !path.exists() {
        return Err(CommandError::Config(format!("instances_path {} does not exist", path.display())));
    }
    load_instances(path)
}

/// Quantifies every instance and writes `reports.jsonl` sorted by user id.
pub fn cmd_quantify(cfg: &RunConfig) -> Result<QuantifyOutcome, CommandError> {
    cfg.validate()?;
    let backend = cfg.backend.build().map_err(backend_err)?;
    cmd_quantify_with(cfg, backend.as_ref())
}

/// `cmd_quantify` against an already constructed backend; `cfg.backend` is ignored.
pub fn cmd_quantify_with(cfg: &RunConfig, backend: &dyn ScoreBackend) -> Result<QuantifyOutcome, CommandError> {
    cfg.validate()?;
    let instances = required_instances(cfg)?;
    quantify_instances(cfg, "quantify", &instances, backend)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub measure: Measure,
    pub k: usize,
    pub n_users: usize,
    pub tau_at_k: f64,
    pub c_at_k: f64,
    pub c_at_k_literal: f64,
    pub mean_ndcg: f64,
    pub ndcg_tie_fraction: f64,
    pub config_fingerprint: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub user_id: String,
    pub measure: Measure,
    pub k: usize,
    pub uncertainty: f64,
    pub ndcg: f64,
    pub config_fingerprint: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub config_fingerprint: String,
    pub seed: u64,
    pub summaries: Vec<EvalSummary>,
}

fn evaluate_lines(cfg: &RunConfig, lines: &[ReportLine]) -> Result<Vec<EvalSummary>, CommandError> {
    if let Some(l) = lines.iter().find(|l| l.ground_truth.is_none()) {
        return Err(EvalError::MissingGroundTruth(l.user_id.clone()).into());
    }
    let users: Vec<ScoredUser<'_>> = lines
        .iter()
        .map(|l| ScoredUser {
            user_id: &l.user_id,
            report: &l.report,
            ranking: &l.ranking_indices,
            ground_truth: l.ground_truth_index,
        })
        .collect();
    let groups = build_records(&users, &cfg.ks, &cfg.measures)?;
    let mut summaries = Vec::new();
    let mut scatter = Vec::new();
    let fingerprint = cfg.fingerprint();
    for group in &groups {
        if group.len() < 2 {
            tracing::warn!(records = group.len(), "measure skipped: fewer than 2 users carry it");
            continue;
        }
        let s = summarize(group)?;
        if s.ndcg_tie_fraction >= 1.0 {
            tracing::warn!(measure = %s.measure, k = s.k, "every NDCG value is tied; tau is reported as 0");
        }
        summaries.push(s);
        scatter.extend(group.iter().map(|r: &EvalRecord| ScatterRow {
            user_id: r.user_id.clone(),
            measure: r.measure,
            k: r.k,
            uncertainty: r.uncertainty,
            ndcg: r.ndcg_at_k,
            config_fingerprint: fingerprint.clone(),
            seed: cfg.seed,
        }));
    }
    if summaries.is_empty() {
        return Err(EvalError::TooFewRecords(lines.len()).into());
    }

    cfg.prepare_output()?;
    let rows: Vec<SummaryRow> = summaries
        .iter()
        .map(|s| SummaryRow {
            measure: s.measure,
            k: s.k,
            n_users: s.n_users,
            tau_at_k: s.tau_at_k,
            c_at_k: s.c_at_k,
            c_at_k_literal: s.c_at_k_literal,
            mean_ndcg: s.mean_ndcg,
            ndcg_tie_fraction: s.ndcg_tie_fraction,
            config_fingerprint: fingerprint.clone(),
            seed: cfg.seed,
        })
        .collect();
    write_csv(&cfg.output_path(SUMMARY_CSV), &rows)?;
    write_json(
        &cfg.output_path(SUMMARY_JSON),
        &SummaryFile {
            config_fingerprint: fingerprint,
            seed: cfg.seed,
            summaries: summaries.clone(),
        },
    )?;
    write_csv(&cfg.output_path(SCATTER_CSV), &scatter)?;
    Ok(summaries)
}

pub fn read_reports(path: &Path) -> Result<Vec<ReportLine>, CommandError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CommandError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Correlates stored reports with NDCG and writes the summary tables.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<EvalSummary>, CommandError> {
    cfg.validate()?;
    let path = cfg.reports_path.clone().unwrap_or_else(|| cfg.output_path(REPORTS_FILE));
    let lines = read_reports(&path)?;
    evaluate_lines(cfg, &lines)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutcome {
    pub quantify: QuantifyOutcome,
    pub summaries: Vec<EvalSummary>,
}

/// Generates a synthetic population, quantifies it, and evaluates it.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulationOutcome, CommandError> {
    cfg.validate()?;
    let BackendConfig::Synthetic(syn) = &cfg.backend else {
        return Err(CommandError::Config("simulate needs a synthetic backend".into()));
    };
    let instances = SyntheticWorld::new(syn.clone()).instances(&cfg.world);
    cfg.prepare_output()?;
    write_jsonl(&cfg.output_path(INSTANCES_FILE), &instances)?;
    let backend = cfg.backend.build().map_err(backend_err)?;
    let quantify = quantify_instances(cfg, "simulate", &instances, backend.as_ref())?;
    let summaries = evaluate_lines(cfg, &quantify.lines)?;
    Ok(SimulationOutcome { quantify, summaries })
}

#[derive(Serialize)]
struct StudyTableRow {
    phase: &'static str,
    target: AdaptTarget,
    n_users: usize,
    k: usize,
    ndcg: f64,
    total_unc: f64,
    recommendation_unc: f64,
    prompt_unc: f64,
    prompt_unc_proportion: f64,
    avg_size: f64,
    backend_calls: usize,
    config_fingerprint: String,
    seed: u64,
}

#[derive(Serialize)]
struct StudyUserRow {
    user_id: String,
    size_before: usize,
    size_after: usize,
    ndcg_before: f64,
    ndcg_after: f64,
    metric_before: f64,
    metric_after: f64,
    config_fingerprint: String,
    seed: u64,
}

#[derive(Serialize)]
struct StudyFile<'a> {
    config_fingerprint: String,
    seed: u64,
    study: &'a AdaptiveStudy,
}

/// Runs the adaptive study; NDCG is reported at the largest configured cutoff.
pub fn cmd_adapt(cfg: &RunConfig) -> Result<AdaptiveStudy, CommandError> {
    cfg.validate()?;
    let policy = cfg
        .adaptation
        .as_ref()
        .ok_or_else(|| CommandError::Config("adapt needs an adaptation policy".into()))?;
    let instances = required_instances(cfg)?;
    let backend = cfg.backend.build().map_err(backend_err)?;
    let templates = cfg.templates()?;
    let ctx = cfg.context(backend.as_ref(), &templates);
    let k = cfg.ks.iter().copied().max().unwrap_or(20);
    let study = cfg.run_in_pool(|| run_adaptive_study(&instances, policy, &ctx, k))??;
    failure_check(cfg, study.n_failed, instances.len(), false)?;

    let fingerprint = cfg.fingerprint();
    cfg.prepare_output()?;
    let table: Vec<StudyTableRow> = [("before", &study.before, study.baseline_backend_calls), ("after", &study.after, study.adaptive_backend_calls)]
        .into_iter()
        .map(|(phase, s, calls)| StudyTableRow {
            phase,
            target: policy.target,
            n_users: study.n_triggered,
            k,
            ndcg: s.ndcg,
            total_unc: s.total_unc,
            recommendation_unc: s.recommendation_unc,
            prompt_unc: s.prompt_unc,
            prompt_unc_proportion: s.prompt_unc_proportion,
            avg_size: s.avg_size,
            backend_calls: calls,
            config_fingerprint: fingerprint.clone(),
            seed: cfg.seed,
        })
        .collect();
    write_csv(&cfg.output_path(STUDY_CSV), &table)?;
    let users: Vec<StudyUserRow> = study
        .rows
        .iter()
        .map(|r| StudyUserRow {
            user_id: r.user_id.clone(),
            size_before: r.before.size,
            size_after: r.after.size,
            ndcg_before: r.before.ndcg,
            ndcg_after: r.after.ndcg,
            metric_before: r.before.metric,
            metric_after: r.after.metric,
            config_fingerprint: fingerprint.clone(),
            seed: cfg.seed,
        })
        .collect();
    write_csv(&cfg.output_path(STUDY_USERS_CSV), &users)?;
    write_json(
        &cfg.output_path(STUDY_JSON),
        &StudyFile {
            config_fingerprint: fingerprint,
            seed: cfg.seed,
            study: &study,
        },
    )?;
    Ok(study)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FetchOutcome {
    pub prompts: usize,
    pub written: usize,
    pub failed: usize,
}

/// Fetches scores for every prompt of every instance into the logit store.
pub fn cmd_fetch_logits(cfg: &RunConfig) -> Result<FetchOutcome, CommandError> {
    cfg.validate()?;
    let backend = cfg.backend.build().map_err(backend_err)?;
    cmd_fetch_logits_with(cfg, backend.as_ref())
}

/// `cmd_fetch_logits` against an already constructed backend; `cfg.backend` is ignored.
pub fn cmd_fetch_logits_with(cfg: &RunConfig, backend: &dyn ScoreBackend) -> Result<FetchOutcome, CommandError> {
    cfg.validate()?;
    let store = cfg
        .store_path
        .clone()
        .ok_or_else(|| CommandError::Config("fetch-logits needs store_path".into()))?;
    let instances = required_instances(cfg)?;
    let templates = cfg.templates()?;
    let ctx = cfg.context(backend, &templates);

    let per_user = cfg.run_in_pool(|| {
        use rayon::prelude::*;
        let mut v: Vec<_> = instances
            .par_iter()
            .map(|inst| {
                let prompts = prompts_for(inst, &ctx);
                (inst.user_id.clone(), prompts.map(|p| {
                    let scores = backend.fetch_batch(&p);
                    (p, scores)
                }))
            })
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    })?;

    let mut records = Vec::new();
    let mut prompts = 0;
    let mut failed_users = 0;
    let mut any_unreachable = false;
    for (user_id, r) in per_user {
        let (ps, scores) = match r {
            Ok(x) => x,
            Err(e) => {
                tracing::error!(%user_id, error = %e, "prompts could not be rendered");
                failed_users += 1;
                continue;
            }
        };
        let mut user_failed = false;
        for (p, s) in ps.iter().zip(scores) {
            prompts += 1;
            match s {
                Ok(label_scores) => records.push(StoredScores {
                    user_id: p.user_id.clone(),
                    prompt_id: p.prompt_id.clone(),
                    label_scores,
                    backend: backend.name().to_string(),
                    model: backend.model(),
                }),
                Err(e) => {
                    tracing::error!(%user_id, prompt_id = %p.prompt_id, error = %e, "fetch failed");
                    any_unreachable |= e.is_unreachable();
                    user_failed = true;
                }
            }
        }
        failed_users += usize::from(user_failed);
    }
    if let Some(parent) = store.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let written = record_label_scores(&store, &records).map_err(|e| match e {
        BackendError::Io(source) => CommandError::Io {
            path: store.display().to_string(),
            source,
        },
        other => CommandError::Config(other.to_string()),
    })?;
    tracing::info!(prompts, written, path = %store.display(), "logit store updated");
    failure_check(cfg, failed_users, instances.len(), any_unreachable)?;
    Ok(FetchOutcome {
        prompts,
        written,
        failed: failed_users,
    })
}
