use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};

/// One line of a dialogue corpus file. Text is whitespace-pretokenized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub history: Vec<String>,
    pub condition: String,
    pub response: String,
}

/// One line of a conditioned text corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextRecord {
    pub condition: String,
    pub text: String,
}

/// Condition labels mapped to dense ids in first-seen order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConditionMap {
    labels: Vec<String>,
    index: HashMap<String, u32>,
}

impl ConditionMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), id);
        id
    }

    pub fn id(&self, label: &str) -> Option<u32> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: u32) -> &str {
        &self.labels[id as usize]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_labels(labels: Vec<String>) -> Self {
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i as u32))
            .collect();
        ConditionMap { labels, index }
    }
}

/// Tokenized dialogue triple.
#[derive(Debug, Clone)]
pub struct DialogueSample {
    pub history: Vec<Vec<u32>>,
    pub condition_id: u32,
    pub response: Vec<u32>,
}

/// Tokenized conditioned text: a dialogue that only has a target side.
#[derive(Debug, Clone)]
pub struct TextSample {
    pub condition_id: u32,
    pub text: Vec<u32>,
}

/// Loaded training data with its condition label mapping.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dialogues: Vec<DialogueSample>,
    pub texts: Vec<TextSample>,
    pub conditions: ConditionMap,
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(
    path: &Path,
    lenient: bool,
) -> Result<(Vec<T>, usize)> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for (lineno, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(line) {
            Ok(r) => records.push(r),
            Err(e) if lenient => {
                eprintln!(
                    "warning: {}:{}: skipping malformed record: {e}",
                    path.display(),
                    lineno + 1
                );
                skipped += 1;
            }
            Err(e) => {
                return Err(Error::Data(format!(
                    "{}:{}: malformed record: {e}",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok((records, skipped))
}

pub fn load_dialogue_records(path: &Path) -> Result<Vec<DialogueRecord>> {
    let (records, _) = parse_jsonl(path, false)?;
    Ok(records)
}

/// Lenient variant used by generation: malformed lines are skipped with a
/// warning naming the line index; returns (records, skipped count).
pub fn load_dialogue_records_lenient(path: &Path) -> Result<(Vec<DialogueRecord>, usize)> {
    parse_jsonl(path, true)
}

pub fn load_text_records(path: &Path) -> Result<Vec<TextRecord>> {
    let (records, _) = parse_jsonl(path, false)?;
    Ok(records)
}

impl Corpus {
    /// Load and tokenize dialogue (and optionally text) corpora. Condition
    /// labels are interned in first-seen order, dialogue corpus first.
    pub fn load(
        dialogue_path: &Path,
        text_path: Option<&Path>,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let dialogue_records = load_dialogue_records(dialogue_path)?;
        let text_records = match text_path {
            Some(p) => load_text_records(p)?,
            None => Vec::new(),
        };
        Self::from_records(&dialogue_records, &text_records, vocab)
    }

    pub fn from_records(
        dialogue_records: &[DialogueRecord],
        text_records: &[TextRecord],
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let mut conditions = ConditionMap::new();
        let mut dialogues = Vec::with_capacity(dialogue_records.len());
        for (i, r) in dialogue_records.iter().enumerate() {
            let history: Vec<Vec<u32>> = r
                .history
                .iter()
                .map(|u| vocab.encode(u))
                .filter(|u| !u.is_empty())
                .collect();
            let response = vocab.encode(&r.response);
            if history.is_empty() || response.is_empty() {
                return Err(Error::Data(format!(
                    "dialogue record {i}: history and response must be non-empty"
                )));
            }
            dialogues.push(DialogueSample {
                history,
                condition_id: conditions.intern(&r.condition),
                response,
            });
        }
        let mut texts = Vec::with_capacity(text_records.len());
        for (i, r) in text_records.iter().enumerate() {
            let text = vocab.encode(&r.text);
            if text.is_empty() {
                return Err(Error::Data(format!(
                    "text record {i}: text must be non-empty"
                )));
            }
            texts.push(TextSample {
                condition_id: conditions.intern(&r.condition),
                text,
            });
        }
        if dialogues.is_empty() {
            return Err(Error::Data("dialogue corpus is empty".into()));
        }
        Ok(Corpus {
            dialogues,
            texts,
            conditions,
        })
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(
            &serde_json::to_string(r).map_err(|e| Error::Data(format!("serialization: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
