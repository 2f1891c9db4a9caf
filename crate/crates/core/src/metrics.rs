//! Automatic evaluation metrics.
//!
//! `unigram_f1` doubles as the similarity used to build pseudo labels and as
//! the reward of the selector's policy-gradient step.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, strip ASCII punctuation, drop articles, collapse whitespace.
pub fn normalize_text(text: &str) -> String {
    let stripped: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    stripped
        .split_whitespace()
        .filter(|tok| !ARTICLES.contains(tok))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Harmonic mean of multiset token precision and recall after
/// normalisation; 0 when either side normalises to nothing.
pub fn unigram_f1(hyp: &str, reference: &str) -> f64 {
    let hyp = normalize_text(hyp);
    let reference = normalize_text(reference);
    let hyp_tokens: Vec<&str> = hyp.split_whitespace().collect();
    let ref_tokens: Vec<&str> = reference.split_whitespace().collect();
    if hyp_tokens.is_empty() || ref_tokens.is_empty() {
        return 0.0;
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for tok in &ref_tokens {
        *ref_counts.entry(tok).or_default() += 1;
    }
    let mut overlap = 0usize;
    for tok in &hyp_tokens {
        if let Some(c) = ref_counts.get_mut(tok) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / hyp_tokens.len() as f64;
    let recall = overlap as f64 / ref_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Word vectors backing the bag-of-words embedding metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dimension: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        Ok(Self {
            dimension,
            vectors: HashMap::new(),
        })
    }

    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dimension {
            return Err(Error::Shape(format!(
                "embedding has {} values, table dimension is {}",
                vector.len(),
                self.dimension
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("embedding contains NaN or Inf".into()));
        }
        self.vectors.insert(token.into(), vector);
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Exact match first, then the lowercased token.
    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors
            .get(token)
            .or_else(|| self.vectors.get(&token.to_lowercase()))
            .map(Vec::as_slice)
    }

    /// Reads `token v1 v2 ... vD` lines; the first line fixes `D`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table: Option<EmbeddingTable> = None;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            let t = match &mut table {
                Some(t) => t,
                None => table.insert(EmbeddingTable::new(values.len())?),
            };
            t.insert(token, values).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
        }
        table.ok_or_else(|| Error::InvalidArgument(format!("{}: empty embedding file", path.display())))
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BowScores {
    pub average: f64,
    pub extrema: f64,
    pub greedy: f64,
}

/// Embedding Average, Vector Extrema and Greedy Matching.
///
/// Tokens are whitespace-separated; out-of-table tokens are skipped. If
/// either side has no known token all three scores are 0.
pub fn bow_metrics(hyp: &str, reference: &str, table: &EmbeddingTable) -> BowScores {
    let lookup = |text: &str| -> Vec<&[f64]> {
        text.split_whitespace().filter_map(|t| table.get(t)).collect()
    };
    let h = lookup(hyp);
    let r = lookup(reference);
    if h.is_empty() || r.is_empty() {
        return BowScores {
            average: 0.0,
            extrema: 0.0,
            greedy: 0.0,
        };
    }
    BowScores {
        average: cosine(&mean_vector(&h), &mean_vector(&r)),
        extrema: cosine(&extrema_vector(&h), &extrema_vector(&r)),
        greedy: 0.5 * (greedy_direction(&h, &r) + greedy_direction(&r, &h)),
    }
}

fn mean_vector(vectors: &[&[f64]]) -> Vec<f64> {
    let dim = vectors[0].len();
    let mut out = vec![0.0; dim];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Per dimension, the value of largest magnitude; a positive value wins a
/// magnitude tie.
fn extrema_vector(vectors: &[&[f64]]) -> Vec<f64> {
    let dim = vectors[0].len();
    (0..dim)
        .map(|d| {
            vectors.iter().map(|v| v[d]).fold(0.0, |best: f64, x| {
                if x.abs() > best.abs() || (x.abs() == best.abs() && x > best) {
                    x
                } else {
                    best
                }
            })
        })
        .collect()
}

fn greedy_direction(from: &[&[f64]], to: &[&[f64]]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|a| {
            to.iter()
                .map(|b| cosine(a, b))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    total / from.len() as f64
}

/// `exp` of the mean per-token negative log-likelihood (natural log).
pub fn perplexity(token_nlls: &[f64]) -> Result<f64> {
    if token_nlls.is_empty() {
        return Err(Error::InvalidArgument("perplexity of an empty NLL list".into()));
    }
    let mean = token_nlls.iter().sum::<f64>() / token_nlls.len() as f64;
    Ok(mean.exp())
}

/// Fraction of examples whose first selected index equals the gold index.
pub fn selection_accuracy(predicted_first: &[usize], gold: &[usize]) -> Result<f64> {
    if predicted_first.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} gold labels",
            predicted_first.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::InvalidArgument("selection accuracy of nothing".into()));
    }
    let hits = predicted_first.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Aggregate scores for one evaluated split. The embedding metrics are
/// absent when no embedding table was configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ppl: f64,
    pub f1: f64,
    pub average: Option<f64>,
    pub extrema: Option<f64>,
    pub greedy: Option<f64>,
    pub selection_accuracy: Option<f64>,
    pub n_examples: usize,
}

impl MetricsReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}
