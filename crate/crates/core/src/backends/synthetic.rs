//! Simulated LLM ranker with controllable noise sources.
//!
//! Each user has latent utilities `u` (normal quantiles in a random candidate
//! order), a difficulty `d` in [0, 1], and a temperature
//! `T_user = signal_floor + signal_scale * (1 - d)`. The held-out item is the
//! user's noisy choice `argmax(u_i + utility_noise_scale / T_user * G_i)` with
//! Gumbel `G`, so at `utility_noise_scale = 1` it is a draw from
//! `softmax(T_user * u)`. The simulated model scores candidate `i` in prompt `p` as
//!
//! ```text
//! z_i = T * ((u_i + m * eps_i) / sqrt(1 + m^2) + prompt_noise_scale * eta_{i,p})
//! m   = utility_noise_scale * d
//! T   = signal_floor + signal_scale * (1 - d_conf)
//! ```
//!
//! Dividing by `sqrt(1 + m^2)` keeps the spread of the misread utilities at one,
//! so only `T` tells the scores how hard a user is.
//!
//! With `confidence_coupling = 1`, `d_conf = d` and the model is calibrated:
//! hard users get flat scores. With `0`, `d_conf` is an independent draw and
//! the scores' spread says nothing about accuracy. With `history_effect = g > 0`,
//! `d`, `d_conf` and the prompt noise inside the model are multiplied by
//! `(history_reference / history_len)^g`.

use rand::Rng;
use rand_distr::{Beta, Distribution, Gumbel, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};
use serde::{Deserialize, Serialize};

use super::{BackendError, LabelScores, ScoreBackend};
use crate::prompting::{DomainVocab, ItemRecord, PromptSample, RankingInstance};
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DifficultyDistribution {
    Uniform { low: f64, high: f64 },
    Beta { alpha: f64, beta: f64 },
    Fixed { value: f64 },
}

impl Default for DifficultyDistribution {
    fn default() -> Self {
        DifficultyDistribution::Uniform { low: 0.0, high: 1.0 }
    }
}

impl DifficultyDistribution {
    fn validate(&self) -> Result<(), BackendError> {
        let ok = match *self {
            DifficultyDistribution::Uniform { low, high } => (0.0..=1.0).contains(&low) && (low..=1.0).contains(&high),
            DifficultyDistribution::Beta { alpha, beta } => alpha > 0.0 && beta > 0.0,
            DifficultyDistribution::Fixed { value } => (0.0..=1.0).contains(&value),
        };
        if ok {
            Ok(())
        } else {
            Err(BackendError::Config(format!("difficulty distribution {self:?} must live in [0, 1]")))
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DifficultyDistribution::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            DifficultyDistribution::Beta { alpha, beta } => {
                Beta::new(alpha, beta).expect("validated parameters").sample(rng)
            }
            DifficultyDistribution::Fixed { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub utility_noise_scale: f64,
    pub prompt_noise_scale: f64,
    pub per_user_difficulty: DifficultyDistribution,
    pub signal_scale: f64,
    pub signal_floor: f64,
    pub confidence_coupling: f64,
    pub history_effect: f64,
    pub history_reference: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            utility_noise_scale: 1.0,
            prompt_noise_scale: 0.3,
            per_user_difficulty: DifficultyDistribution::Beta { alpha: 0.5, beta: 0.5 },
            signal_scale: 8.0,
            signal_floor: 0.25,
            confidence_coupling: 1.0,
            history_effect: 0.0,
            history_reference: 20,
        }
    }
}

impl SyntheticConfig {
    pub(super) fn validate(&self) -> Result<(), BackendError> {
        self.per_user_difficulty.validate()?;
        let nonneg = [
            ("utility_noise_scale", self.utility_noise_scale),
            ("prompt_noise_scale", self.prompt_noise_scale),
            ("signal_scale", self.signal_scale),
            ("signal_floor", self.signal_floor),
            ("history_effect", self.history_effect),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(BackendError::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        if !(0.0..=1.0).contains(&self.confidence_coupling) {
            return Err(BackendError::Config("confidence_coupling must be in [0, 1]".into()));
        }
        if self.history_reference == 0 {
            return Err(BackendError::Config("history_reference must be at least 1".into()));
        }
        Ok(())
    }

    fn history_factor(&self, history_len: usize) -> f64 {
        if self.history_effect == 0.0 {
            return 1.0;
        }
        (self.history_reference as f64 / history_len.max(1) as f64).powf(self.history_effect)
    }
}

/// Latent state of one simulated user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserLatent {
    pub difficulty: f64,
    pub confidence_difficulty: f64,
    pub utilities: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Shape of a generated population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub users: usize,
    pub candidates: usize,
    pub history_length: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            users: 500,
            candidates: 20,
            history_length: 30,
        }
    }
}

/// A deterministic population of users and their latent state.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    cfg: SyntheticConfig,
    root: SeedStream,
}

fn normal(stream: SeedStream) -> f64 {
    stream.rng().sample(StandardNormal)
}

impl SyntheticWorld {
    pub fn new(cfg: SyntheticConfig) -> Self {
        let root = SeedStream::new(cfg.seed).child("synthetic-world");
        Self { cfg, root }
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    /// Latent state for the first `n` candidates of `user_id`.
    ///
    /// Utilities are the normal quantiles of each candidate's rank among the
    /// `n`; the rank keys have one stream per candidate, so the order of the
    /// first `n` candidates does not depend on `n`.
    pub fn user(&self, user_id: &str, n: usize) -> UserLatent {
        let s = self.root.child(user_id);
        let difficulty = self.cfg.per_user_difficulty.draw(&mut s.child("difficulty").rng());
        let independent = self.cfg.per_user_difficulty.draw(&mut s.child("confidence").rng());
        let c = self.cfg.confidence_coupling;
        let keys: Vec<f64> = (0..n as u64).map(|i| s.child("utility").index(i).rng().random()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
        let std_normal = Normal::standard();
        let mut utilities = vec![0.0; n];
        for (rank, &i) in order.iter().enumerate() {
            utilities[i] = std_normal.inverse_cdf((rank as f64 + 0.5) / n as f64);
        }
        UserLatent {
            difficulty,
            confidence_difficulty: c * difficulty + (1.0 - c) * independent,
            utilities,
            noise: (0..n as u64).map(|i| normal(s.child("noise").index(i))).collect(),
        }
    }

    fn user_temperature(&self, difficulty: f64) -> f64 {
        self.cfg.signal_floor + self.cfg.signal_scale * (1.0 - difficulty)
    }

    /// The user's held-out choice among `n` candidates.
    pub fn choice(&self, user_id: &str, n: usize) -> usize {
        let latent = self.user(user_id, n);
        let scale = self.cfg.utility_noise_scale / self.user_temperature(latent.difficulty);
        let gumbel = Gumbel::new(0.0, 1.0).expect("valid Gumbel");
        let mut rng = self.root.child(user_id).child("choice").rng();
        latent
            .utilities
            .iter()
            .map(|u| u + scale * gumbel.sample(&mut rng))
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map_or(0, |(i, _)| i)
    }

    pub fn user_id(index: usize) -> String {
        format!("u{index:05}")
    }

    /// Instances whose ground truth is each user's noisy choice.
    pub fn instances(&self, spec: &WorldSpec) -> Vec<RankingInstance> {
        (0..spec.users)
            .map(|j| {
                let user_id = Self::user_id(j);
                let candidates: Vec<ItemRecord> = (0..spec.candidates)
                    .map(|i| ItemRecord::new(format!("{user_id}-c{i:02}"), format!("Title {j}.{i}")))
                    .collect();
                let ground_truth = (spec.candidates > 0).then(|| candidates[self.choice(&user_id, spec.candidates)].id.clone());
                RankingInstance {
                    history: (0..spec.history_length)
                        .map(|i| ItemRecord::new(format!("{user_id}-h{i:02}"), format!("Seen {j}.{i}")))
                        .collect(),
                    ground_truth,
                    candidates,
                    user_id,
                    ground_truth_absent: false,
                    domain_vocab: DomainVocab::default(),
                }
            })
            .collect()
    }

    /// Canonical-order logits the simulated model assigns under `prompt`.
    pub fn logits(&self, prompt: &PromptSample) -> Vec<f64> {
        let n = prompt.permutation.len();
        let latent = self.user(&prompt.user_id, n);
        let factor = self.cfg.history_factor(prompt.applied_history.len());
        let d = (latent.difficulty * factor).min(1.0);
        let d_conf = (latent.confidence_difficulty * factor).min(1.0);
        let temperature = self.user_temperature(d_conf);
        let prompt_scale = self.cfg.prompt_noise_scale * factor;
        let misread = self.cfg.utility_noise_scale * d;
        let spread = (1.0 + misread * misread).sqrt();
        let eta = self.root.child(&prompt.user_id).child("prompt").child(&prompt.prompt_id);
        latent
            .utilities
            .iter()
            .zip(&latent.noise)
            .enumerate()
            .map(|(i, (u, e))| {
                let noise = if prompt_scale > 0.0 { prompt_scale * normal(eta.index(i as u64)) } else { 0.0 };
                temperature * ((u + misread * e) / spread + noise)
            })
            .collect()
    }
}

/// Scores prompts from a `SyntheticWorld`, reported as label log-probabilities.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    world: SyntheticWorld,
}

impl SyntheticBackend {
    pub fn new(cfg: SyntheticConfig) -> Self {
        Self {
            world: SyntheticWorld::new(cfg),
        }
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }
}

impl ScoreBackend for SyntheticBackend {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn model(&self) -> String {
        let json = serde_json::to_string(self.world.config()).expect("config serializes");
        crate::fingerprint(json.as_bytes())
    }

    fn fetch_label_scores(&self, prompt: &PromptSample) -> Result<LabelScores, BackendError> {
        let z = self.world.logits(prompt);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        Ok(prompt
            .labels
            .iter()
            .zip(&prompt.permutation)
            .map(|(label, &c)| (label.clone(), z[c] - lse))
            .collect())
    }
}
