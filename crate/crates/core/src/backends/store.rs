//! Append-only JSONL logit store and the backend that replays it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BackendError, LabelScores, ScoreBackend};
use crate::prompting::PromptSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub file_path: PathBuf,
    /// Only replay records written by this `backend:model`; any record matches when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_fingerprint: Option<String>,
}

impl FileConfig {
    pub(super) fn validate(&self) -> Result<(), BackendError> {
        if self.file_path.as_os_str().is_empty() {
            return Err(BackendError::Config("file backend needs file_path".into()));
        }
        Ok(())
    }
}

/// One line of the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredScores {
    pub user_id: String,
    pub prompt_id: String,
    pub label_scores: BTreeMap<String, f64>,
    pub backend: String,
    pub model: String,
}

impl StoredScores {
    pub fn fingerprint(&self) -> String {
        format!("{}:{}", self.backend, self.model)
    }

    fn key(&self) -> (String, String, String) {
        (self.user_id.clone(), self.prompt_id.clone(), self.fingerprint())
    }
}

/// Reads every record; a missing file is an empty store.
pub fn read_store(path: &Path) -> Result<Vec<StoredScores>, BackendError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| BackendError::CorruptStore {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Appends records whose (user, prompt, fingerprint) key is not stored yet.
/// Returns the number of lines written.
pub fn record_label_scores(path: &Path, records: &[StoredScores]) -> Result<usize, BackendError> {
    let mut seen: HashSet<_> = read_store(path)?.iter().map(StoredScores::key).collect();
    let fresh: Vec<&StoredScores> = records.iter().filter(|r| seen.insert(r.key())).collect();
    if fresh.is_empty() {
        return Ok(0);
    }
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = BufWriter::new(file);
    for r in &fresh {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(fresh.len())
}

/// Replays scores from a logit store.
#[derive(Debug, Clone)]
pub struct FileBackend {
    index: HashMap<(String, String), LabelScores>,
    model: String,
}

impl FileBackend {
    pub fn open(cfg: &FileConfig) -> Result<Self, BackendError> {
        if !cfg.file_path.exists() {
            return Err(BackendError::Config(format!("logit store {} does not exist", cfg.file_path.display())));
        }
        let mut index = HashMap::new();
        for rec in read_store(&cfg.file_path)? {
            if cfg.source_fingerprint.as_ref().is_some_and(|f| *f != rec.fingerprint()) {
                continue;
            }
            index.entry((rec.user_id, rec.prompt_id)).or_insert(rec.label_scores);
        }
        Ok(Self {
            index,
            model: cfg.source_fingerprint.clone().unwrap_or_else(|| "any".into()),
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

impl ScoreBackend for FileBackend {
    fn name(&self) -> &str {
        "file"
    }

    fn model(&self) -> String {
        self.model.clone()
    }

    fn fetch_label_scores(&self, prompt: &PromptSample) -> Result<LabelScores, BackendError> {
        self.index
            .get(&(prompt.user_id.clone(), prompt.prompt_id.clone()))
            .cloned()
            .ok_or_else(|| BackendError::NotFound {
                user_id: prompt.user_id.clone(),
                prompt_id: prompt.prompt_id.clone(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: &str, prompt: &str, a: f64) -> StoredScores {
        StoredScores {
            user_id: user.into(),
            prompt_id: prompt.into(),
            label_scores: [("A".to_string(), a), ("B".to_string(), -2.25)].into_iter().collect(),
            backend: "http".into(),
            model: "m1".into(),
        }
    }

    fn prompt(user: &str, id: &str) -> PromptSample {
        PromptSample {
            user_id: user.into(),
            prompt_id: id.into(),
            draw_index: 0,
            rendered_text: String::new(),
            labels: vec!["A".into(), "B".into()],
            permutation: vec![0, 1],
            applied_history: vec![],
            edit: None,
            template_version: "1".into(),
        }
    }

    #[test]
    fn write_then_fetch_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let r = rec("u1", "d0-abc", -0.123_456_789_012_345_68);
        assert_eq!(record_label_scores(&path, std::slice::from_ref(&r)).unwrap(), 1);
        let b = FileBackend::open(&FileConfig { file_path: path, source_fingerprint: None }).unwrap();
        assert_eq!(b.fetch_label_scores(&prompt("u1", "d0-abc")).unwrap(), r.label_scores);
        assert!(matches!(b.fetch_label_scores(&prompt("u1", "d1-abc")), Err(BackendError::NotFound { .. })));
    }

    #[test]
    fn duplicate_writes_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let batch = [rec("u1", "p", -0.5), rec("u2", "p", -0.5)];
        assert_eq!(record_label_scores(&path, &batch).unwrap(), 2);
        assert_eq!(record_label_scores(&path, &batch).unwrap(), 0);
        assert_eq!(record_label_scores(&path, &[rec("u1", "p", -0.5), rec("u1", "p", -0.5)]).unwrap(), 0);
        let mut other = rec("u1", "p", -0.5);
        other.model = "m2".into();
        assert_eq!(record_label_scores(&path, &[other]).unwrap(), 1);
        assert_eq!(read_store(&path).unwrap().len(), 3);
    }

    #[test]
    fn corrupt_line_is_reported_with_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        record_label_scores(&path, &[rec("u1", "p", -0.5)]).unwrap();
        std::fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{not json\n").unwrap();
        match read_store(&path) {
            Err(BackendError::CorruptStore { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected corrupt-store error, got {other:?}"),
        }
        assert!(record_label_scores(&path, &[rec("u3", "p", 0.0)]).is_err());
    }

    #[test]
    fn fingerprint_filter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        record_label_scores(&path, &[rec("u1", "p", -0.5)]).unwrap();
        let only_m2 = FileConfig { file_path: path.clone(), source_fingerprint: Some("http:m2".into()) };
        assert!(FileBackend::open(&only_m2).unwrap().is_empty());
        let only_m1 = FileConfig { file_path: path, source_fingerprint: Some("http:m1".into()) };
        assert_eq!(FileBackend::open(&only_m1).unwrap().len(), 1);
    }
}
