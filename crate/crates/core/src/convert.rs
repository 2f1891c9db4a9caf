//! Converters from the Wizard of Wikipedia and CMU_DoG release formats to
//! the line-delimited corpus format.
//!
//! Filtering rules:
//!
//! * Wizard: one example per wizard turn that has at least one earlier
//!   utterance and a non-empty knowledge pool. The pool is the chosen
//!   topic passage followed by every passage retrieved for that turn,
//!   with duplicate sentences removed. The checked sentence, when it is in
//!   the pool, becomes the gold index. Apprentice turns are speaker A and
//!   wizard turns speaker B.
//! * CMU_DoG: consecutive messages from one user are merged into a turn.
//!   Every turn after the first becomes an example whose knowledge is the
//!   document section shown when the turn was written. The first user to
//!   speak is speaker A. There are no gold indices.
//!
//! Text is lowercased and punctuation is split off into its own token.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use crate::corpus::{Corpus, Example, Speaker, Split, Utterance};
use crate::error::{Error, Result};

/// Lowercases and surrounds ASCII punctuation with spaces.
pub fn normalize_dialogue_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 8);
    for c in text.chars() {
        if c.is_ascii_punctuation() && c != '\'' {
            out.push(' ');
            out.push(c);
            out.push(' ');
        } else {
            out.extend(c.to_lowercase());
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Naive sentence split on `.`, `!` or `?` followed by whitespace.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().map_or(true, |n| n.is_whitespace()) {
            let s = current.trim();
            if !s.is_empty() {
                sentences.push(s.to_string());
            }
            current.clear();
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        sentences.push(s.to_string());
    }
    sentences
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

/// Adds normalised, non-empty, unseen sentences to `pool`.
fn extend_pool(pool: &mut Vec<String>, seen: &mut HashSet<String>, sentences: impl IntoIterator<Item = String>) {
    for s in sentences {
        let s = normalize_dialogue_text(&s);
        if !s.is_empty() && seen.insert(s.clone()) {
            pool.push(s);
        }
    }
}

fn passage_sentences(passages: &Value) -> Vec<String> {
    // [{title: [sentence, ...]}, ...]
    let mut out = Vec::new();
    for passage in passages.as_array().into_iter().flatten() {
        for sentences in passage.as_object().into_iter().flat_map(|o| o.values()) {
            out.extend(sentences.as_array().into_iter().flatten().filter_map(|s| s.as_str().map(String::from)));
        }
    }
    out
}

#[derive(Deserialize)]
struct WizardDialog {
    #[serde(default)]
    chosen_topic: Option<String>,
    #[serde(default)]
    chosen_topic_passage: Vec<String>,
    dialog: Vec<WizardTurn>,
}

#[derive(Deserialize)]
struct WizardTurn {
    speaker: String,
    text: String,
    #[serde(default)]
    checked_sentence: Value,
    #[serde(default)]
    retrieved_passages: Value,
}

/// Converts a Wizard of Wikipedia release file (a JSON list of dialogues).
pub fn convert_wizard(path: impl AsRef<Path>, split: Split) -> Result<Corpus> {
    let path = path.as_ref();
    let dialogs: Vec<WizardDialog> = serde_json::from_value(read_json(path)?).map_err(|e| Error::Parse {
        line: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    let mut examples = Vec::new();
    for dialog in dialogs {
        let mut history: Vec<Utterance> = Vec::new();
        for turn in dialog.dialog {
            let text = normalize_dialogue_text(&turn.text);
            if text.is_empty() {
                continue;
            }
            let is_wizard = turn.speaker.to_lowercase().contains("wizard");
            if is_wizard && !history.is_empty() {
                let mut pool = Vec::new();
                let mut seen = HashSet::new();
                extend_pool(&mut pool, &mut seen, dialog.chosen_topic_passage.iter().cloned());
                extend_pool(&mut pool, &mut seen, passage_sentences(&turn.retrieved_passages));
                if !pool.is_empty() {
                    let gold = turn
                        .checked_sentence
                        .as_object()
                        .and_then(|o| o.values().next())
                        .and_then(Value::as_str)
                        .map(normalize_dialogue_text)
                        .and_then(|s| pool.iter().position(|p| *p == s));
                    examples.push(Example {
                        context: history.clone(),
                        knowledge: pool,
                        response: text.clone(),
                        gold_knowledge_index: gold,
                        topic: dialog.chosen_topic.clone(),
                    });
                }
            }
            let speaker = if is_wizard { Speaker::B } else { Speaker::A };
            history.push(Utterance::new(speaker, text));
        }
    }
    Ok(Corpus::new(split, examples))
}

#[derive(Deserialize)]
struct DogConversation {
    history: Vec<DogMessage>,
    #[serde(rename = "wikiDocumentIdx")]
    wiki_document_idx: Value,
}

#[derive(Deserialize)]
struct DogMessage {
    #[serde(rename = "docIdx")]
    doc_idx: usize,
    text: String,
    uid: String,
}

/// Knowledge sentences of each section of a CMU_DoG document. Section 0 is
/// the metadata object; its fields are flattened to one sentence each.
fn dog_sections(doc: &Value) -> Vec<Vec<String>> {
    let mut sections = Vec::new();
    for idx in 0.. {
        let Some(section) = doc.get(idx.to_string()) else { break };
        let mut sentences = Vec::new();
        match section {
            Value::String(s) => sentences.extend(split_sentences(s)),
            Value::Object(fields) => {
                for (key, value) in fields {
                    match value {
                        Value::String(s) => sentences.extend(split_sentences(&format!("{key} : {s}"))),
                        Value::Array(items) => {
                            for item in items.iter().filter_map(Value::as_str) {
                                sentences.extend(split_sentences(&format!("{key} : {item}")));
                            }
                        }
                        Value::Number(n) => sentences.push(format!("{key} : {n}")),
                        _ => {}
                    }
                }
            }
            _ => {}
        }
        sections.push(sentences);
    }
    sections
}

fn conversation_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![input.to_path_buf()])
    }
}

/// Converts CMU_DoG conversations. `input` is one conversation file or a
/// directory of them; `docs` holds `<wikiDocumentIdx>.json` documents.
pub fn convert_cmu_dog(input: impl AsRef<Path>, docs: impl AsRef<Path>, split: Split) -> Result<Corpus> {
    let docs = docs.as_ref();
    let mut examples = Vec::new();
    for file in conversation_files(input.as_ref())? {
        let conv: DogConversation = serde_json::from_value(read_json(&file)?).map_err(|e| Error::Parse {
            line: 0,
            message: format!("{}: {e}", file.display()),
        })?;
        let doc_id = match &conv.wiki_document_idx {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let sections = dog_sections(&read_json(&docs.join(format!("{doc_id}.json")))?);
        // merge consecutive messages by the same user
        let mut turns: Vec<(String, usize, String)> = Vec::new();
        for msg in conv.history {
            let text = normalize_dialogue_text(&msg.text);
            if text.is_empty() {
                continue;
            }
            match turns.last_mut() {
                Some(last) if last.0 == msg.uid => {
                    last.2.push(' ');
                    last.2.push_str(&text);
                    last.1 = msg.doc_idx;
                }
                _ => turns.push((msg.uid, msg.doc_idx, text)),
            }
        }
        let first_uid = turns.first().map(|t| t.0.clone());
        let mut history = Vec::new();
        for (uid, doc_idx, text) in turns {
            if !history.is_empty() {
                let mut pool = Vec::new();
                let mut seen = HashSet::new();
                extend_pool(&mut pool, &mut seen, sections.get(doc_idx).cloned().unwrap_or_default());
                if !pool.is_empty() {
                    examples.push(Example {
                        context: history.clone(),
                        knowledge: pool,
                        response: text.clone(),
                        gold_knowledge_index: None,
                        topic: Some(doc_id.clone()),
                    });
                }
            }
            let speaker = if Some(&uid) == first_uid.as_ref() { Speaker::A } else { Speaker::B };
            history.push(Utterance::new(speaker, text));
        }
    }
    Ok(Corpus::new(split, examples))
}
