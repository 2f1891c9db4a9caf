//! Pseudo ground-truth knowledge built from the gold response.
//!
//! Candidates are ranked by unigram F1 against the response and the label
//! keeps the shortest ranked prefix whose concatenation scores best.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Example};
use crate::error::{Error, Result};
use crate::metrics::unigram_f1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    /// All candidate indices, most similar first.
    pub ranked_indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// Length of the selected prefix of `ranked_indices`.
    pub m_bar: usize,
}

impl PseudoLabel {
    /// The selected knowledge indices, in ranked order.
    pub fn selected(&self) -> &[usize] {
        &self.ranked_indices[..self.m_bar]
    }

    /// The selected prefix capped at `limit` sentences.
    pub fn selected_capped(&self, limit: usize) -> &[usize] {
        &self.ranked_indices[..self.m_bar.min(limit)]
    }
}

/// Sorts candidates by descending F1 against `response`, ties by index.
pub fn rank_by_similarity(knowledge: &[String], response: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    if knowledge.is_empty() {
        return Err(Error::InvalidArgument("no knowledge sentences to rank".into()));
    }
    let scores: Vec<f64> = knowledge.iter().map(|k| unigram_f1(k, response)).collect();
    let mut order: Vec<usize> = (0..knowledge.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let sorted = order.iter().map(|&i| scores[i]).collect();
    Ok((order, sorted))
}

pub fn build_pseudo_label(knowledge: &[String], response: &str) -> Result<PseudoLabel> {
    let (ranked_indices, scores) = rank_by_similarity(knowledge, response)?;
    let mut prefix = String::new();
    let mut best = f64::NEG_INFINITY;
    let mut m_bar = 1;
    for (t, &idx) in ranked_indices.iter().enumerate() {
        if t > 0 {
            prefix.push(' ');
        }
        prefix.push_str(&knowledge[idx]);
        let sim = unigram_f1(&prefix, response);
        // strict improvement keeps the shortest maximising prefix
        if sim > best {
            best = sim;
            m_bar = t + 1;
        }
    }
    Ok(PseudoLabel {
        ranked_indices,
        scores,
        m_bar,
    })
}

/// Pseudo-labelled views of a corpus for selector and generator warm-up.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupCorpora {
    /// (context, knowledge, pseudo label) triples.
    pub selector_corpus: Vec<(Example, PseudoLabel)>,
    /// (context, pseudo knowledge, response) triples.
    pub generator_corpus: Vec<(Example, PseudoLabel)>,
}

impl WarmupCorpora {
    pub fn len(&self) -> usize {
        self.selector_corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selector_corpus.is_empty()
    }

    pub fn labels(&self) -> Vec<PseudoLabel> {
        self.selector_corpus.iter().map(|(_, l)| l.clone()).collect()
    }
}

pub fn build_labels(corpus: &Corpus) -> Result<Vec<PseudoLabel>> {
    corpus
        .examples
        .iter()
        .map(|ex| build_pseudo_label(&ex.knowledge, &ex.response))
        .collect()
}

pub fn build_warmup_corpora(corpus: &Corpus) -> Result<WarmupCorpora> {
    let labels = build_labels(corpus)?;
    Ok(warmup_corpora_from_labels(corpus, labels))
}

pub fn warmup_corpora_from_labels(corpus: &Corpus, labels: Vec<PseudoLabel>) -> WarmupCorpora {
    let pairs: Vec<(Example, PseudoLabel)> = corpus.examples.iter().cloned().zip(labels).collect();
    WarmupCorpora {
        selector_corpus: pairs.clone(),
        generator_corpus: pairs,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    corpus_hash: String,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    example_id: usize,
    ranked_indices: Vec<usize>,
    scores: Vec<f64>,
    m_bar: usize,
}

/// Writes labels as line-delimited records after a header line carrying
/// the corpus content hash.
pub fn save_cache(path: impl AsRef<Path>, corpus: &Corpus, labels: &[PseudoLabel]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    serde_json::to_writer(
        &mut out,
        &CacheHeader {
            corpus_hash: corpus.content_hash(),
            count: labels.len(),
        },
    )?;
    out.push(b'\n');
    for (example_id, label) in labels.iter().enumerate() {
        serde_json::to_writer(
            &mut out,
            &CacheRecord {
                example_id,
                ranked_indices: label.ranked_indices.clone(),
                scores: label.scores.clone(),
                m_bar: label.m_bar,
            },
        )?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Loads cached labels, or `None` when the cache belongs to other content.
pub fn load_cache(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Option<Vec<PseudoLabel>>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let Some(header) = lines.next() else {
        return Ok(None);
    };
    let header: CacheHeader =
        serde_json::from_str(&header.map_err(|e| Error::io(path, e))?)?;
    if header.corpus_hash != corpus.content_hash() || header.count != corpus.len() {
        return Ok(None);
    }
    let mut labels = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        if rec.example_id != labels.len() {
            return Err(Error::Parse {
                line: i + 2,
                message: format!("expected example_id {}, found {}", labels.len(), rec.example_id),
            });
        }
        labels.push(PseudoLabel {
            ranked_indices: rec.ranked_indices,
            scores: rec.scores,
            m_bar: rec.m_bar,
        });
    }
    if labels.len() != header.count {
        return Ok(None);
    }
    Ok(Some(labels))
}

/// Cached labels when the cache matches `corpus`, otherwise computes and
/// writes them.
pub fn load_or_build(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Vec<PseudoLabel>> {
    let path = path.as_ref();
    if path.exists() {
        if let Some(labels) = load_cache(path, corpus)? {
            return Ok(labels);
        }
    }
    let labels = build_labels(corpus)?;
    save_cache(path, corpus, &labels)?;
    Ok(labels)
}
