//! Conversation corpora: the JSONL data model, loading and saving, and the
//! text rendering fed to the query producers.
//!
//! One JSON object per line:
//!
//! ```json
//! {"id":"d1","history":[{"speaker":"user","text":"hi"}],"response":{"speaker":"system","text":"hello"},"gold_query":"greeting"}
//! ```
//!
//! `response`, `gold_query` and `gold_title` are optional. A file is either
//! fully labeled (every line has `gold_query`) or fully unlabeled.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    #[serde(alias = "USER", alias = "User")]
    User,
    #[serde(alias = "SYSTEM", alias = "System")]
    System,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::System => "system",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

impl Turn {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Turn {
            speaker,
            text: text.into(),
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Turn::new(Speaker::User, text)
    }

    pub fn system(text: impl Into<String>) -> Self {
        Turn::new(Speaker::System, text)
    }
}

/// One turn-point of a conversation: the history before the turn, the turn
/// itself (the response) and, for labeled data, the search query issued there.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueInstance {
    pub id: String,
    pub history: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_query: Option<String>,
    /// Title of the document the gold query should retrieve (used by Recall@k).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_title: Option<String>,
}

impl DialogueInstance {
    pub fn validate(&self) -> Result<()> {
        if self.history.is_empty() {
            return Err(Error::Schema(format!("instance `{}` has an empty history", self.id)));
        }
        let turns = self.history.iter().chain(self.response.iter());
        for turn in turns {
            if turn.text.trim().is_empty() {
                return Err(Error::Schema(format!("instance `{}` has a blank turn", self.id)));
            }
        }
        if let Some(q) = &self.gold_query {
            if q.trim().is_empty() {
                return Err(Error::Schema(format!("instance `{}` has an empty gold_query", self.id)));
            }
        }
        Ok(())
    }

    pub fn response_or_err(&self) -> Result<&Turn> {
        self.response.as_ref().ok_or_else(|| Error::MissingField {
            id: self.id.clone(),
            field: "response",
        })
    }

    pub fn gold_or_err(&self) -> Result<&str> {
        self.gold_query.as_deref().ok_or_else(|| Error::MissingField {
            id: self.id.clone(),
            field: "gold_query",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<DialogueInstance>,
    pub labeled: bool,
}

impl Dataset {
    /// Builds a dataset, inferring and checking the labeled flag.
    pub fn new(name: impl Into<String>, instances: Vec<DialogueInstance>) -> Result<Self> {
        let name = name.into();
        for inst in &instances {
            inst.validate()?;
        }
        let with_gold = instances.iter().filter(|i| i.gold_query.is_some()).count();
        if with_gold != 0 && with_gold != instances.len() {
            return Err(Error::Schema(format!(
                "dataset `{name}` mixes labeled and unlabeled instances ({with_gold} of {} carry gold_query)",
                instances.len()
            )));
        }
        let labeled = !instances.is_empty() && with_gold == instances.len();
        Ok(Dataset {
            name,
            instances,
            labeled,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn require_labeled(&self) -> Result<()> {
        if self.labeled {
            Ok(())
        } else {
            Err(Error::Schema(format!("dataset `{}` is not labeled", self.name)))
        }
    }

    pub fn require_responses(&self) -> Result<()> {
        self.instances.iter().try_for_each(|i| i.response_or_err().map(|_| ()))
    }

    pub fn get(&self, id: &str) -> Option<&DialogueInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    /// First `n` instances under a new name.
    pub fn head(&self, n: usize, name: impl Into<String>) -> Dataset {
        Dataset {
            name: name.into(),
            instances: self.instances.iter().take(n).cloned().collect(),
            labeled: self.labeled,
        }
    }
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut instances = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: DialogueInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        inst.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        instances.push(inst);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, instances)
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for inst in &dataset.instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Returns an unlabeled copy. Responses and everything else are kept.
pub fn strip_labels(dataset: &Dataset) -> Dataset {
    if !dataset.labeled {
        log::warn!("dataset `{}` is already unlabeled; nothing to strip", dataset.name);
    }
    Dataset {
        name: dataset.name.clone(),
        instances: dataset
            .instances
            .iter()
            .map(|i| DialogueInstance {
                gold_query: None,
                ..i.clone()
            })
            .collect(),
        labeled: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Query producer: history only.
    Qp,
    /// Response-augmented producer: history plus the response turn.
    Ra,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Qp => "qp",
            Role::Ra => "ra",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputFormat {
    pub separator: String,
    /// Keep only the most recent turns. `None` uses the full history.
    pub max_turns: Option<usize>,
}

impl Default for InputFormat {
    fn default() -> Self {
        InputFormat {
            separator: "<sep>".to_string(),
            max_turns: None,
        }
    }
}

pub fn build_model_input(inst: &DialogueInstance, role: Role, format: &InputFormat) -> Result<String> {
    let skip = match format.max_turns {
        Some(m) => inst.history.len().saturating_sub(m),
        None => 0,
    };
    let sep = format!(" {} ", format.separator);
    let mut out = inst.history[skip..]
        .iter()
        .map(|t| format!("{}: {}", t.speaker.tag(), t.text.trim()))
        .collect::<Vec<_>>()
        .join(&sep);
    if role == Role::Ra {
        let response = inst.response_or_err()?;
        out.push_str(&sep);
        out.push_str("response: ");
        out.push_str(response.text.trim());
    }
    Ok(out)
}
