//! Prompt construction for top-1 elicitation.
//!
//! A prompting scheme is a distribution over prompts for one user. Each draw
//! renders the user's history and candidate set through a template, assigns
//! index labels ("A", "B", ... or "1", "2", ...) to candidate positions, and
//! ends with a question whose answer is a single label token.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pl::{LogitVector, PlError};
use crate::rng::SeedStream;

/// Letter labels cap the candidate set.
pub const MAX_CANDIDATES: usize = 26;

/// Default gap (nats) below the lowest observed label score for labels the
/// backend did not return.
pub const DEFAULT_FILL_MARGIN: f64 = 5.0;

pub const DEFAULT_SAMPLES: usize = 5;
pub const DEFAULT_HISTORY_LIMIT: usize = 20;
pub const DEFAULT_HISTORY_SIZES: [usize; 5] = [10, 15, 20, 25, 30];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("instance {user_id}: {reason}")]
    InvalidInstance { user_id: String, reason: String },
    #[error("invalid prompting scheme: {0}")]
    InvalidScheme(String),
    #[error("draw index {draw} outside 0..{samples}")]
    DrawOutOfRange { draw: usize, samples: usize },
    #[error("template: {0}")]
    Template(String),
    #[error("reading template {path}: {source}")]
    TemplateIo {
        path: String,
        source: std::io::Error,
    },
    #[error("prompt text does not match the template: {0}")]
    Parse(String),
    #[error("no label scores to convert")]
    EmptyScores,
    #[error("label {0:?} is not used by this prompt")]
    UnknownLabel(String),
    #[error(transparent)]
    Logits(#[from] PlError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

impl ItemRecord {
    pub fn new(id: impl Into<String>, title: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            description: String::new(),
        }
    }

    /// Title as it appears in a prompt line.
    pub fn display_text(&self) -> String {
        self.title.replace(['\n', '\r'], " ")
    }
}

/// Verb/noun substituted into templates, e.g. watch/movie or play/game.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainVocab {
    pub verb: String,
    pub noun: String,
}

impl Default for DomainVocab {
    fn default() -> Self {
        Self {
            verb: "watch".into(),
            noun: "movie".into(),
        }
    }
}

impl DomainVocab {
    fn capitalized_noun(&self) -> String {
        let mut c = self.noun.chars();
        match c.next() {
            Some(f) => f.to_uppercase().chain(c).collect(),
            None => String::new(),
        }
    }
}

/// One user's history (oldest first), candidates in retrieval order, and held-out item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingInstance {
    pub user_id: String,
    #[serde(default)]
    pub history: Vec<ItemRecord>,
    pub candidates: Vec<ItemRecord>,
    #[serde(default)]
    pub ground_truth: Option<String>,
    /// Set when the ground truth is known not to be among the candidates.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ground_truth_absent: bool,
    #[serde(default)]
    pub domain_vocab: DomainVocab,
}

impl RankingInstance {
    pub fn validate(&self) -> Result<(), PromptError> {
        let invalid = |reason: String| PromptError::InvalidInstance {
            user_id: self.user_id.clone(),
            reason,
        };
        if self.candidates.is_empty() {
            return Err(invalid("candidate set is empty".into()));
        }
        if self.candidates.len() > MAX_CANDIDATES {
            return Err(invalid(format!(
                "{} candidates exceed the label limit of {MAX_CANDIDATES}",
                self.candidates.len()
            )));
        }
        let mut ids: Vec<&str> = self.candidates.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("duplicate candidate ids".into()));
        }
        if let Some(gt) = &self.ground_truth {
            let present = self.candidates.iter().any(|c| &c.id == gt);
            if !present && !self.ground_truth_absent {
                return Err(invalid(format!(
                    "ground truth {gt:?} is not a candidate and not flagged absent"
                )));
            }
        }
        Ok(())
    }

    /// Candidate index of the ground-truth item, if it is in the candidate set.
    pub fn ground_truth_index(&self) -> Option<usize> {
        let gt = self.ground_truth.as_ref()?;
        self.candidates.iter().position(|c| &c.id == gt)
    }

    /// Keeps the first `n` candidates of the retrieval order.
    pub fn with_candidate_limit(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.candidates.truncate(n);
        if out.ground_truth.is_some() && out.ground_truth_index().is_none() {
            out.ground_truth_absent = true;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeVariant {
    /// Random candidate positions per draw, full (limited) history.
    #[default]
    Default,
    /// History truncated to a size drawn from `history_sizes`; fixed candidate order.
    VaryHistorySize,
    /// Random candidate positions per draw.
    VaryCandidateOrder,
    /// One textual edit per draw; fixed candidate order.
    SlightEdit,
}

impl SchemeVariant {
    fn shuffles_candidates(self) -> bool {
        matches!(self, SchemeVariant::Default | SchemeVariant::VaryCandidateOrder)
    }
}

/// Small textual variations of the default prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptEdit {
    /// "Candidate [A]" becomes "Movie [A]".
    LabelWord,
    /// "Candidate [A]" becomes "Candidate [1]".
    DigitLabels,
    /// "Candidate [A]" becomes "Candidate A".
    NoBrackets,
    /// "'title'" becomes "title".
    NoQuotes,
}

impl PromptEdit {
    pub const ALL: [PromptEdit; 4] = [
        PromptEdit::LabelWord,
        PromptEdit::DigitLabels,
        PromptEdit::NoBrackets,
        PromptEdit::NoQuotes,
    ];

    fn file_stem(self) -> &'static str {
        match self {
            PromptEdit::LabelWord => "edit_label_word",
            PromptEdit::DigitLabels => "edit_digit_labels",
            PromptEdit::NoBrackets => "edit_no_brackets",
            PromptEdit::NoQuotes => "edit_no_quotes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptScheme {
    pub variant: SchemeVariant,
    pub history_sizes: Vec<usize>,
    /// Fixed edit for `SlightEdit`; when unset, draws cycle through all four.
    pub edit_id: Option<PromptEdit>,
    pub samples: usize,
    pub seed: u64,
    /// Most-recent history items kept by variants that do not vary history size.
    pub history_limit: usize,
}

impl Default for PromptScheme {
    fn default() -> Self {
        Self {
            variant: SchemeVariant::Default,
            history_sizes: DEFAULT_HISTORY_SIZES.to_vec(),
            edit_id: None,
            samples: DEFAULT_SAMPLES,
            seed: 0,
            history_limit: DEFAULT_HISTORY_LIMIT,
        }
    }
}

impl PromptScheme {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.samples == 0 {
            return Err(PromptError::InvalidScheme("samples must be at least 1".into()));
        }
        if self.variant == SchemeVariant::VaryHistorySize && self.history_sizes.is_empty() {
            return Err(PromptError::InvalidScheme(
                "vary_history_size needs at least one history size".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStyle {
    Letters,
    Digits,
}

impl LabelStyle {
    pub fn labels(self, n: usize) -> Vec<String> {
        match self {
            LabelStyle::Letters => (0..n).map(|i| char::from(b'A' + i as u8).to_string()).collect(),
            LabelStyle::Digits => (1..=n).map(|i| i.to_string()).collect(),
        }
    }
}

/// Prompt template loaded from a TOML file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub version: String,
    pub label_style: LabelStyle,
    pub history_line: String,
    pub candidate_line: String,
    pub body: String,
}

impl PromptTemplate {
    pub fn from_toml(text: &str) -> Result<Self, PromptError> {
        let t: Self = toml::from_str(text).map_err(|e| PromptError::Template(e.to_string()))?;
        for needle in ["{history}", "{candidates}"] {
            if t.body.matches(needle).count() != 1 {
                return Err(PromptError::Template(format!("body must contain {needle} exactly once")));
            }
        }
        if t.body.find("{history}") > t.body.find("{candidates}") {
            return Err(PromptError::Template("{history} must precede {candidates}".into()));
        }
        if !t.candidate_line.contains("{label}") || !t.candidate_line.contains("{item}") {
            return Err(PromptError::Template("candidate_line needs {label} and {item}".into()));
        }
        if !t.history_line.contains("{item}") {
            return Err(PromptError::Template("history_line needs {item}".into()));
        }
        Ok(t)
    }

    fn apply_vocab(&self, text: &str, vocab: &DomainVocab) -> String {
        text.replace("{verb}", &vocab.verb)
            .replace("{noun}", &vocab.noun)
            .replace("{Noun}", &vocab.capitalized_noun())
    }

    fn render(&self, vocab: &DomainVocab, history: &[&ItemRecord], candidates: &[(String, &ItemRecord)]) -> String {
        let history_line = self.apply_vocab(&self.history_line, vocab);
        let candidate_line = self.apply_vocab(&self.candidate_line, vocab);
        let history_block: Vec<String> = history
            .iter()
            .map(|item| history_line.replace("{item}", &item.display_text()))
            .collect();
        let candidate_block: Vec<String> = candidates
            .iter()
            .map(|(label, item)| {
                candidate_line
                    .replace("{label}", label)
                    .replace("{item}", &item.display_text())
            })
            .collect();
        self.apply_vocab(&self.body, vocab)
            .replace("{history}", &history_block.join("\n"))
            .replace("{candidates}", &candidate_block.join("\n"))
    }
}

/// The default template and its four edits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub default: PromptTemplate,
    edits: Vec<(PromptEdit, PromptTemplate)>,
}

impl TemplateSet {
    /// Templates shipped with the crate.
    pub fn builtin() -> Self {
        let parse = |s: &str| PromptTemplate::from_toml(s).expect("bundled template is valid");
        Self {
            default: parse(include_str!("../templates/default.toml")),
            edits: vec![
                (PromptEdit::LabelWord, parse(include_str!("../templates/edit_label_word.toml"))),
                (PromptEdit::DigitLabels, parse(include_str!("../templates/edit_digit_labels.toml"))),
                (PromptEdit::NoBrackets, parse(include_str!("../templates/edit_no_brackets.toml"))),
                (PromptEdit::NoQuotes, parse(include_str!("../templates/edit_no_quotes.toml"))),
            ],
        }
    }

    /// Loads `default.toml` and the four `edit_*.toml` files from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let load = |stem: &str| -> Result<PromptTemplate, PromptError> {
            let path = dir.join(format!("{stem}.toml"));
            let text = std::fs::read_to_string(&path).map_err(|source| PromptError::TemplateIo {
                path: path.display().to_string(),
                source,
            })?;
            PromptTemplate::from_toml(&text)
        };
        let mut edits = Vec::with_capacity(4);
        for e in PromptEdit::ALL {
            edits.push((e, load(e.file_stem())?));
        }
        Ok(Self {
            default: load("default")?,
            edits,
        })
    }

    pub fn get(&self, edit: Option<PromptEdit>) -> &PromptTemplate {
        match edit {
            None => &self.default,
            Some(e) => &self.edits.iter().find(|(k, _)| *k == e).expect("all edits loaded").1,
        }
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

/// A rendered prompt and how it maps labels back to candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSample {
    pub user_id: String,
    /// Draw index plus a digest of the rendered text.
    pub prompt_id: String,
    pub draw_index: usize,
    pub rendered_text: String,
    /// Label shown at each displayed position.
    pub labels: Vec<String>,
    /// Candidate index shown at each displayed position.
    pub permutation: Vec<usize>,
    pub applied_history: Vec<String>,
    pub edit: Option<PromptEdit>,
    pub template_version: String,
}

impl PromptSample {
    pub fn candidate_for_label(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label).map(|pos| self.permutation[pos])
    }

    pub fn label_for_candidate(&self, candidate: usize) -> Option<&str> {
        self.permutation
            .iter()
            .position(|&c| c == candidate)
            .map(|pos| self.labels[pos].as_str())
    }

    /// Label to candidate index.
    pub fn label_map(&self) -> BTreeMap<String, usize> {
        self.labels.iter().cloned().zip(self.permutation.iter().copied()).collect()
    }
}

/// Renders draw `draw_index` of `scheme` for `instance`.
///
/// The result depends only on the instance, the scheme (including its seed),
/// the templates, and the draw index.
pub fn render_prompt(
    instance: &RankingInstance,
    scheme: &PromptScheme,
    templates: &TemplateSet,
    draw_index: usize,
) -> Result<PromptSample, PromptError> {
    instance.validate()?;
    scheme.validate()?;
    if draw_index >= scheme.samples {
        return Err(PromptError::DrawOutOfRange {
            draw: draw_index,
            samples: scheme.samples,
        });
    }
    let stream = SeedStream::new(scheme.seed)
        .child(&instance.user_id)
        .child("prompt")
        .index(draw_index as u64);

    let requested = match scheme.variant {
        SchemeVariant::VaryHistorySize => {
            let mut rng = stream.child("history").rng();
            scheme.history_sizes[rng.random_range(0..scheme.history_sizes.len())]
        }
        _ => scheme.history_limit,
    };
    let available = instance.history.len();
    if requested > available && scheme.variant == SchemeVariant::VaryHistorySize {
        tracing::warn!(
            user_id = %instance.user_id,
            requested,
            available,
            "history size clamped to available history"
        );
    }
    let kept = requested.min(available);
    let history: Vec<&ItemRecord> = instance.history[available - kept..].iter().collect();

    let n = instance.candidates.len();
    let mut permutation: Vec<usize> = (0..n).collect();
    if scheme.variant.shuffles_candidates() {
        permutation.shuffle(&mut stream.child("order").rng());
    }

    let edit = match scheme.variant {
        SchemeVariant::SlightEdit => {
            Some(scheme.edit_id.unwrap_or(PromptEdit::ALL[draw_index % PromptEdit::ALL.len()]))
        }
        _ => None,
    };
    let template = templates.get(edit);
    let labels = template.label_style.labels(n);
    let shown: Vec<(String, &ItemRecord)> = labels
        .iter()
        .cloned()
        .zip(permutation.iter().map(|&c| &instance.candidates[c]))
        .collect();
    let rendered_text = template.render(&instance.domain_vocab, &history, &shown);
    let digest = hex::encode(&Sha256::digest(rendered_text.as_bytes())[..6]);

    Ok(PromptSample {
        user_id: instance.user_id.clone(),
        prompt_id: format!("d{draw_index}-{digest}"),
        draw_index,
        rendered_text,
        labels,
        permutation,
        applied_history: history.iter().map(|h| h.id.clone()).collect(),
        edit,
        template_version: template.version.clone(),
    })
}

/// All `scheme.samples` draws for one instance.
pub fn sample_prompt_set(
    instance: &RankingInstance,
    scheme: &PromptScheme,
    templates: &TemplateSet,
) -> Result<Vec<PromptSample>, PromptError> {
    (0..scheme.samples)
        .map(|d| render_prompt(instance, scheme, templates, d))
        .collect()
}

/// Canonical-order logits plus the labels that had to be filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelLogits {
    pub logits: LogitVector,
    pub filled_labels: Vec<String>,
}

/// Re-indexes label-token scores into candidate order.
///
/// Labels missing from `label_scores` get `min(observed) - fill_margin`.
pub fn logits_from_label_scores(
    label_scores: &BTreeMap<String, f64>,
    sample: &PromptSample,
    fill_margin: f64,
) -> Result<LabelLogits, PromptError> {
    if label_scores.is_empty() {
        return Err(PromptError::EmptyScores);
    }
    if let Some(unknown) = label_scores.keys().find(|l| !sample.labels.contains(l)) {
        return Err(PromptError::UnknownLabel(unknown.clone()));
    }
    let floor = label_scores.values().copied().fold(f64::INFINITY, f64::min) - fill_margin;
    let mut values = vec![0.0; sample.permutation.len()];
    let mut filled_labels = Vec::new();
    for (label, &candidate) in sample.labels.iter().zip(&sample.permutation) {
        values[candidate] = match label_scores.get(label) {
            Some(&s) => s,
            None => {
                filled_labels.push(label.clone());
                floor
            }
        };
    }
    Ok(LabelLogits {
        logits: LogitVector::new(values)?,
        filled_labels,
    })
}

/// History texts and (label, item text) pairs recovered from a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub history: Vec<String>,
    pub candidates: Vec<(String, String)>,
}

enum Piece<'a> {
    Lit(&'a str),
    Label,
    Item,
}

fn line_pieces(line: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut rest = line;
    while let Some(start) = rest.find('{') {
        let (tag, piece) = if rest[start..].starts_with("{label}") {
            ("{label}", Piece::Label)
        } else if rest[start..].starts_with("{item}") {
            ("{item}", Piece::Item)
        } else {
            pieces.push(Piece::Lit(&rest[..=start]));
            rest = &rest[start + 1..];
            continue;
        };
        if start > 0 {
            pieces.push(Piece::Lit(&rest[..start]));
        }
        pieces.push(piece);
        rest = &rest[start + tag.len()..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Lit(rest));
    }
    pieces
}

/// Matches one rendered line against a line template; returns (label, item).
fn match_line(template: &str, line: &str) -> Option<(Option<String>, String)> {
    let pieces = line_pieces(template);
    let mut rest = line;
    let mut label = None;
    let mut item = None;
    for (i, piece) in pieces.iter().enumerate() {
        match piece {
            Piece::Lit(lit) => rest = rest.strip_prefix(lit)?,
            Piece::Label | Piece::Item => {
                let value = match pieces.get(i + 1) {
                    Some(Piece::Lit(next)) if i + 2 == pieces.len() => rest.strip_suffix(next)?,
                    Some(Piece::Lit(next)) => &rest[..rest.find(next)?],
                    None => rest,
                    Some(_) => return None,
                };
                rest = &rest[value.len()..];
                if matches!(piece, Piece::Label) {
                    label = Some(value.to_string());
                } else {
                    item = Some(value.to_string());
                }
            }
        }
    }
    rest.is_empty().then_some(())?;
    Some((label, item?))
}

/// Recovers the history and candidate lines of a prompt rendered with `template`.
pub fn parse_prompt(
    text: &str,
    template: &PromptTemplate,
    vocab: &DomainVocab,
) -> Result<ParsedPrompt, PromptError> {
    let body = template.apply_vocab(&template.body, vocab);
    let (head, rest) = body.split_once("{history}").expect("validated template");
    let (middle, tail) = rest.split_once("{candidates}").expect("validated template");
    let inner = text
        .strip_prefix(head)
        .and_then(|t| t.strip_suffix(tail))
        .ok_or_else(|| PromptError::Parse("header or footer differs".into()))?;
    let split = inner
        .find(middle)
        .ok_or_else(|| PromptError::Parse("section separator not found".into()))?;
    let (history_block, candidate_block) = (&inner[..split], &inner[split + middle.len()..]);

    let lines = |block: &str| -> Vec<String> {
        if block.is_empty() {
            Vec::new()
        } else {
            block.split('\n').map(str::to_string).collect()
        }
    };
    let history_line = template.apply_vocab(&template.history_line, vocab);
    let candidate_line = template.apply_vocab(&template.candidate_line, vocab);
    let history = lines(history_block)
        .iter()
        .map(|l| {
            match_line(&history_line, l)
                .map(|(_, item)| item)
                .ok_or_else(|| PromptError::Parse(format!("history line {l:?}")))
        })
        .collect::<Result<_, _>>()?;
    let candidates = lines(candidate_block)
        .iter()
        .map(|l| match match_line(&candidate_line, l) {
            Some((Some(label), item)) => Ok((label, item)),
            _ => Err(PromptError::Parse(format!("candidate line {l:?}"))),
        })
        .collect::<Result<_, _>>()?;
    Ok(ParsedPrompt {
        history,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn instance(history: usize, candidates: usize) -> RankingInstance {
        RankingInstance {
            user_id: "u1".into(),
            history: (0..history).map(|i| ItemRecord::new(format!("h{i}"), format!("Past Film {i}"))).collect(),
            candidates: (0..candidates)
                .map(|i| ItemRecord::new(format!("c{i}"), format!("Film {i} (199{})", i % 10)))
                .collect(),
            ground_truth: Some("c0".into()),
            ground_truth_absent: false,
            domain_vocab: DomainVocab::default(),
        }
    }

    fn scheme(variant: SchemeVariant) -> PromptScheme {
        PromptScheme {
            variant,
            seed: 42,
            ..Default::default()
        }
    }

    fn lines_with(text: &str, marker: &str) -> Vec<String> {
        text.lines().filter(|l| l.contains(marker)).map(str::to_string).collect()
    }

    #[test]
    fn rendering_is_deterministic() {
        let t = TemplateSet::builtin();
        let a = render_prompt(&instance(25, 20), &scheme(SchemeVariant::Default), &t, 2).unwrap();
        let b = render_prompt(&instance(25, 20), &scheme(SchemeVariant::Default), &t, 2).unwrap();
        assert_eq!(a, b);
        let c = render_prompt(&instance(25, 20), &scheme(SchemeVariant::Default), &t, 3).unwrap();
        assert_ne!(a.rendered_text, c.rendered_text);
    }

    #[test]
    fn candidate_order_draws_differ_only_in_candidate_lines() {
        let t = TemplateSet::builtin();
        let s = scheme(SchemeVariant::VaryCandidateOrder);
        let a = render_prompt(&instance(12, 20), &s, &t, 0).unwrap();
        let b = render_prompt(&instance(12, 20), &s, &t, 1).unwrap();
        assert_ne!(a.permutation, b.permutation);
        let strip = |p: &PromptSample| -> Vec<String> {
            p.rendered_text.lines().filter(|l| !l.starts_with("Candidate [")).map(str::to_string).collect()
        };
        assert_eq!(strip(&a), strip(&b));
        let mut la = lines_with(&a.rendered_text, "Candidate [");
        let mut lb = lines_with(&b.rendered_text, "Candidate [");
        assert_ne!(la, lb);
        // Same items, different positions.
        let items = |ls: &mut Vec<String>| {
            let mut v: Vec<String> = ls.iter().map(|l| l[l.find(']').unwrap()..].to_string()).collect();
            v.sort();
            v
        };
        assert_eq!(items(&mut la), items(&mut lb));
    }

    #[test]
    fn history_sizes_come_from_the_scheme() {
        let t = TemplateSet::builtin();
        let mut s = scheme(SchemeVariant::VaryHistorySize);
        s.samples = 40;
        let inst = instance(40, 20);
        let mut seen = std::collections::BTreeSet::new();
        for p in sample_prompt_set(&inst, &s, &t).unwrap() {
            assert!(DEFAULT_HISTORY_SIZES.contains(&p.applied_history.len()));
            // Most recent items are kept.
            assert_eq!(p.applied_history.last().unwrap(), "h39");
            assert_eq!(p.permutation, (0..20).collect::<Vec<_>>());
            seen.insert(p.applied_history.len());
        }
        assert!(seen.len() > 1);

        let short = instance(12, 20);
        for p in sample_prompt_set(&short, &s, &t).unwrap() {
            assert!([10, 12].contains(&p.applied_history.len()));
        }
    }

    #[test]
    fn history_variant_never_touches_candidate_lines() {
        let t = TemplateSet::builtin();
        let mut s = scheme(SchemeVariant::VaryHistorySize);
        s.samples = 10;
        let set = sample_prompt_set(&instance(30, 20), &s, &t).unwrap();
        let first = lines_with(&set[0].rendered_text, "Candidate [");
        for p in &set {
            assert_eq!(lines_with(&p.rendered_text, "Candidate ["), first);
        }
    }

    #[test]
    fn slight_edits_cycle_and_apply_one_change() {
        let t = TemplateSet::builtin();
        let set = sample_prompt_set(&instance(5, 4), &scheme(SchemeVariant::SlightEdit), &t).unwrap();
        let edits: Vec<_> = set.iter().map(|p| p.edit.unwrap()).collect();
        assert_eq!(edits, vec![PromptEdit::LabelWord, PromptEdit::DigitLabels, PromptEdit::NoBrackets, PromptEdit::NoQuotes, PromptEdit::LabelWord]);
        assert!(set[0].rendered_text.contains("Movie [A] 'Film 0 (1990)'"));
        assert!(set[1].rendered_text.contains("Candidate [1] 'Film 0 (1990)'"));
        assert!(set[2].rendered_text.contains("Candidate A 'Film 0 (1990)'"));
        assert!(set[3].rendered_text.contains("Candidate [A] Film 0 (1990)"));
        assert!(set[3].rendered_text.contains("\nPast Film 4\n"));

        let mut fixed = scheme(SchemeVariant::SlightEdit);
        fixed.edit_id = Some(PromptEdit::NoBrackets);
        let set = sample_prompt_set(&instance(5, 4), &fixed, &t).unwrap();
        assert!(set.iter().all(|p| p.edit == Some(PromptEdit::NoBrackets)));
    }

    #[test]
    fn default_scheme_uses_letters_a_to_t() {
        let t = TemplateSet::builtin();
        let set = sample_prompt_set(&instance(20, 20), &scheme(SchemeVariant::Default), &t).unwrap();
        assert_eq!(set.len(), 5);
        let expected: Vec<String> = ('A'..='T').map(|c| c.to_string()).collect();
        let mut perms = std::collections::BTreeSet::new();
        for p in &set {
            assert_eq!(p.labels, expected);
            perms.insert(p.permutation.clone());
        }
        assert_eq!(perms.len(), 5);
        let ids: std::collections::BTreeSet<_> = set.iter().map(|p| p.prompt_id.clone()).collect();
        assert_eq!(ids.len(), 5);
    }

    #[test]
    fn single_sample_scheme() {
        let mut s = scheme(SchemeVariant::Default);
        s.samples = 1;
        assert_eq!(sample_prompt_set(&instance(3, 3), &s, &TemplateSet::builtin()).unwrap().len(), 1);
        assert!(matches!(
            render_prompt(&instance(3, 3), &s, &TemplateSet::builtin(), 1),
            Err(PromptError::DrawOutOfRange { .. })
        ));
    }

    #[test]
    fn golden_default_prompt() {
        let mut inst = instance(2, 3);
        inst.domain_vocab = DomainVocab { verb: "play".into(), noun: "game".into() };
        let mut s = scheme(SchemeVariant::SlightEdit);
        s.edit_id = Some(PromptEdit::LabelWord);
        let p = render_prompt(&inst, &s, &TemplateSet::builtin(), 0).unwrap();
        let expected = "These are the games I have chosen to play in the past, in chronological order:\n\
'Past Film 0'\n'Past Film 1'\n\n\
Now there are candidate games that I can play next:\n\
Game [A] 'Film 0 (1990)'\nGame [B] 'Film 1 (1991)'\nGame [C] 'Film 2 (1992)'\n\n\
Which game would I like to play next most? Answer with the index of exactly one candidate and nothing else.\n";
        assert_eq!(p.rendered_text, expected);
    }

    #[test]
    fn instance_validation() {
        let t = TemplateSet::builtin();
        let s = scheme(SchemeVariant::Default);
        assert!(render_prompt(&instance(3, 27), &s, &t, 0).is_err());
        assert!(render_prompt(&instance(3, 0), &s, &t, 0).is_err());
        let mut missing = instance(3, 3);
        missing.ground_truth = Some("elsewhere".into());
        assert!(missing.validate().is_err());
        missing.ground_truth_absent = true;
        assert!(missing.validate().is_ok());
        let mut deep = instance(3, 10);
        deep.ground_truth = Some("c7".into());
        let truncated = deep.with_candidate_limit(3);
        assert!(truncated.ground_truth_absent);
        assert_eq!(truncated.ground_truth_index(), None);
        let mut bad = scheme(SchemeVariant::VaryHistorySize);
        bad.history_sizes.clear();
        assert!(matches!(render_prompt(&instance(3, 3), &bad, &t, 0), Err(PromptError::InvalidScheme(_))));
    }

    fn sample_with(permutation: Vec<usize>) -> PromptSample {
        let n = permutation.len();
        PromptSample {
            user_id: "u".into(),
            prompt_id: "p".into(),
            draw_index: 0,
            rendered_text: String::new(),
            labels: LabelStyle::Letters.labels(n),
            permutation,
            applied_history: vec![],
            edit: None,
            template_version: "1".into(),
        }
    }

    fn scores(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(l, s)| (l.to_string(), *s)).collect()
    }

    #[test]
    fn label_scores_identity_and_reverse() {
        let s = scores(&[("A", -0.1), ("B", -1.0), ("C", -2.5), ("D", -3.0)]);
        let id = logits_from_label_scores(&s, &sample_with(vec![0, 1, 2, 3]), DEFAULT_FILL_MARGIN).unwrap();
        assert_eq!(id.logits.values(), &[-0.1, -1.0, -2.5, -3.0]);
        assert!(id.filled_labels.is_empty());
        let rev = logits_from_label_scores(&s, &sample_with(vec![3, 2, 1, 0]), DEFAULT_FILL_MARGIN).unwrap();
        assert_eq!(rev.logits.values(), &[-3.0, -2.5, -1.0, -0.1]);
    }

    #[test]
    fn missing_label_is_filled_below_minimum() {
        let s = scores(&[("A", -0.5), ("B", -2.0), ("D", -1.0)]);
        let out = logits_from_label_scores(&s, &sample_with(vec![0, 1, 2, 3]), DEFAULT_FILL_MARGIN).unwrap();
        assert_eq!(out.logits.values()[2], -7.0);
        assert_eq!(out.filled_labels, vec!["C".to_string()]);
    }

    #[test]
    fn label_score_errors() {
        let sample = sample_with(vec![0, 1]);
        assert!(matches!(logits_from_label_scores(&BTreeMap::new(), &sample, 5.0), Err(PromptError::EmptyScores)));
        assert!(matches!(
            logits_from_label_scores(&scores(&[("Z", 0.0)]), &sample, 5.0),
            Err(PromptError::UnknownLabel(l)) if l == "Z"
        ));
    }

    #[test]
    fn template_validation() {
        assert!(PromptTemplate::from_toml("version='1'\nlabel_style='letters'\nhistory_line='{item}'\ncandidate_line='{label} {item}'\nbody='{candidates}'").is_err());
        let t = TemplateSet::load_dir(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/templates"))).unwrap();
        assert_eq!(t, TemplateSet::builtin());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rendered_prompts_parse_back(
            history in 0usize..35,
            candidates in 1usize..=26,
            seed in any::<u64>(),
            variant in prop::sample::select(vec![SchemeVariant::Default, SchemeVariant::VaryHistorySize, SchemeVariant::VaryCandidateOrder, SchemeVariant::SlightEdit]),
            draw in 0usize..5,
        ) {
            let t = TemplateSet::builtin();
            let inst = instance(history, candidates);
            let s = PromptScheme { variant, seed, ..Default::default() };
            let p = render_prompt(&inst, &s, &t, draw).unwrap();
            let parsed = parse_prompt(&p.rendered_text, t.get(p.edit), &inst.domain_vocab).unwrap();
            let want_history: Vec<String> = p.applied_history.iter()
                .map(|id| inst.history.iter().find(|h| &h.id == id).unwrap().title.clone())
                .collect();
            prop_assert_eq!(parsed.history, want_history);
            prop_assert_eq!(parsed.candidates.len(), candidates);
            let mut perm = p.permutation.clone();
            perm.sort_unstable();
            prop_assert_eq!(perm, (0..candidates).collect::<Vec<_>>());
            for (label, text) in &parsed.candidates {
                let c = p.candidate_for_label(label).unwrap();
                prop_assert_eq!(text, &inst.candidates[c].title);
            }
        }

        #[test]
        fn permuted_scores_recover_candidate_logits(z in prop::collection::vec(-5.0f64..5.0, 2..12), seed in any::<u64>()) {
            // A scorer that depends only on the candidate, not its position.
            let n = z.len();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut SeedStream::new(seed).rng());
            let sample = sample_with(perm.clone());
            let label_scores: BTreeMap<String, f64> = sample.labels.iter().zip(&perm).map(|(l, &c)| (l.clone(), z[c])).collect();
            let out = logits_from_label_scores(&label_scores, &sample, DEFAULT_FILL_MARGIN).unwrap();
            prop_assert_eq!(out.logits.values(), z.as_slice());
        }
    }
}
