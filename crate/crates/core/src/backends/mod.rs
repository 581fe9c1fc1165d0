//! Sources of label-token log-scores for rendered prompts.

mod http;
mod store;
mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::PromptSample;

pub use http::{extract_label_scores, HttpBackend, HttpConfig, ReqwestTransport, Transport, TransportError};
pub use store::{read_store, record_label_scores, FileBackend, FileConfig, StoredScores};
pub use synthetic::{DifficultyDistribution, SyntheticBackend, SyntheticConfig, SyntheticWorld, UserLatent, WorldSpec};

/// Label token to log-score, for one prompt.
pub type LabelScores = BTreeMap<String, f64>;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no stored scores for user {user_id:?}, prompt {prompt_id:?}")]
    NotFound { user_id: String, prompt_id: String },
    #[error("retryable failure after {attempts} attempts: {message}")]
    RetriesExhausted { attempts: usize, message: String },
    #[error("request rejected with status {status}: {body}")]
    Fatal { status: u16, body: String },
    #[error("endpoint unreachable after {attempts} attempts: {message}")]
    Unreachable { attempts: usize, message: String },
    #[error("only {recovered} label tokens recoverable from the response")]
    Degraded { recovered: usize },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("{path}:{line}: {message}")]
    CorruptStore {
        path: String,
        line: usize,
        message: String,
    },
    #[error("backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BackendError {
    pub fn is_unreachable(&self) -> bool {
        matches!(self, BackendError::Unreachable { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    File(FileConfig),
    Http(HttpConfig),
    Synthetic(SyntheticConfig),
}

impl BackendConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            BackendConfig::File(_) => "file",
            BackendConfig::Http(_) => "http",
            BackendConfig::Synthetic(_) => "synthetic",
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self {
            BackendConfig::File(c) => c.validate(),
            BackendConfig::Http(c) => c.validate(),
            BackendConfig::Synthetic(c) => c.validate(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn ScoreBackend>, BackendError> {
        self.validate()?;
        Ok(match self {
            BackendConfig::File(c) => Box::new(FileBackend::open(c)?),
            BackendConfig::Http(c) => Box::new(HttpBackend::new(c.clone(), Box::new(ReqwestTransport::new()?))?),
            BackendConfig::Synthetic(c) => Box::new(SyntheticBackend::new(c.clone())),
        })
    }
}

pub trait ScoreBackend: Send + Sync {
    /// Backend name written to the logit store, e.g. "http".
    fn name(&self) -> &str;

    /// Model identifier written to the logit store.
    fn model(&self) -> String;

    /// `name:model`, the store key component.
    fn fingerprint(&self) -> String {
        format!("{}:{}", self.name(), self.model())
    }

    fn fetch_label_scores(&self, prompt: &PromptSample) -> Result<LabelScores, BackendError>;

    /// Scores for many prompts, returned in input order.
    fn fetch_batch(&self, prompts: &[PromptSample]) -> Vec<Result<LabelScores, BackendError>> {
        prompts.iter().map(|p| self.fetch_label_scores(p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_is_tagged_by_kind() {
        let c: BackendConfig = serde_json::from_str(r#"{"kind":"file","file_path":"x.jsonl"}"#).unwrap();
        assert_eq!(c.kind(), "file");
        let c: BackendConfig = serde_json::from_str(
            r#"{"kind":"http","endpoint_url":"http://localhost:1/v1/chat/completions","model_name":"m"}"#,
        )
        .unwrap();
        match c {
            BackendConfig::Http(h) => {
                assert_eq!(h.top_logprobs, 20);
                assert_eq!(h.max_concurrent_requests, 4);
            }
            _ => panic!("wrong kind"),
        }
        let c: BackendConfig = serde_json::from_str(r#"{"kind":"synthetic","seed":3}"#).unwrap();
        assert_eq!(c.kind(), "synthetic");
    }

    #[test]
    fn foreign_parameter_blocks_are_rejected() {
        assert!(serde_json::from_str::<BackendConfig>(r#"{"kind":"file","file_path":"x","model_name":"m"}"#).is_err());
        assert!(serde_json::from_str::<BackendConfig>(r#"{"kind":"synthetic","endpoint_url":"u"}"#).is_err());
        assert!(serde_json::from_str::<BackendConfig>(r#"{"kind":"grpc"}"#).is_err());
    }
}
