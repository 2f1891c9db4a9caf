//! Corpus-level evaluation and the two parameter sweeps.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Example, Tokenizer};
use crate::error::{Error, Result};
use crate::generation::{
    assemble_input, assemble_trunc_baseline, generate, response_nll, response_targets, AssembledInput,
};
use crate::metrics::{bow_metrics, perplexity, selection_accuracy, unigram_f1, EmbeddingTable, MetricsReport};
use crate::selection::{
    build_encoder_inputs, select_from_encodings, KnowledgeEncodings, KnowledgeSelection, SelectMode,
};
use crate::training::Models;

/// How the generator input is built during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Assembly {
    /// Greedy knowledge selection with at most `t_max` sentences.
    Select { t_max: usize },
    /// Every knowledge sentence, truncated to fit `budget` total tokens.
    Truncate { budget: usize },
}

pub struct EvalSettings<'a> {
    pub assembly: Assembly,
    pub response_budget: usize,
    pub embeddings: Option<&'a EmbeddingTable>,
}

/// Per-example evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub example_id: usize,
    pub selection: Option<KnowledgeSelection>,
    pub text: String,
    pub token_count: usize,
    pub mean_nll: f64,
    pub f1: f64,
    /// Teacher-forced NLLs of the gold response tokens (including `[EOS]`).
    pub gold_nlls: Vec<f64>,
}

/// Serialised form of a generated response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub example_id: usize,
    pub text: String,
    pub token_count: usize,
    pub mean_nll: f64,
}

/// Serialised form of a knowledge selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub example_id: usize,
    pub indices: Vec<usize>,
    pub step_log_probs: Vec<f64>,
    pub terminated_by: crate::selection::Termination,
}

impl SelectionRecord {
    pub fn new(example_id: usize, selection: &KnowledgeSelection) -> Self {
        Self {
            example_id,
            indices: selection.indices.clone(),
            step_log_probs: selection.step_log_probs.clone(),
            terminated_by: selection.terminated_by,
        }
    }
}

/// Greedy selection for one example. Reads only context and knowledge.
pub fn greedy_select(models: &Models, example: &Example, t_max: usize, tokenizer: &dyn Tokenizer) -> Result<KnowledgeSelection> {
    let inputs = build_encoder_inputs(&example.context, &example.knowledge, models.encoder.config.budget, tokenizer)?;
    let encodings: KnowledgeEncodings = crate::selection::encode_candidates(&models.encoder, &inputs)?;
    select_from_encodings(&models.selector, &encodings, t_max, SelectMode::Greedy, None)
}

fn assemble(
    models: &Models,
    example: &Example,
    settings: &EvalSettings<'_>,
    tokenizer: &dyn Tokenizer,
) -> Result<(Option<KnowledgeSelection>, AssembledInput)> {
    let capacity = models.generator.config.capacity;
    match settings.assembly {
        Assembly::Select { t_max } => {
            let selection = greedy_select(models, example, t_max, tokenizer)?;
            let knowledge: Vec<String> = selection.indices.iter().map(|&i| example.knowledge[i].clone()).collect();
            let input = assemble_input(&example.context, &knowledge, capacity, settings.response_budget, tokenizer)?;
            Ok((Some(selection), input))
        }
        Assembly::Truncate { budget } => {
            if budget > capacity {
                return Err(Error::Config(format!(
                    "truncation budget {budget} exceeds the generator capacity {capacity}"
                )));
            }
            let input =
                assemble_trunc_baseline(&example.context, &example.knowledge, budget, settings.response_budget, tokenizer)?;
            Ok((None, input))
        }
    }
}

/// Selects, assembles, generates and scores one example.
pub fn evaluate_example(
    models: &Models,
    example_id: usize,
    example: &Example,
    settings: &EvalSettings<'_>,
    tokenizer: &dyn Tokenizer,
) -> Result<ExampleResult> {
    let (selection, input) = assemble(models, example, settings, tokenizer)?;
    let out = generate(&models.generator, &input, settings.response_budget, tokenizer)?;
    let mut targets = response_targets(tokenizer, &example.response);
    targets.truncate(models.generator.config.capacity + 1 - input.len());
    let gold_nlls = response_nll(&models.generator, &input, &targets)?;
    Ok(ExampleResult {
        example_id,
        selection,
        f1: unigram_f1(&out.text, &example.response),
        mean_nll: out.mean_nll(),
        token_count: out.ids.len(),
        text: out.text,
        gold_nlls,
    })
}

/// Aggregates per-example results: scores are unweighted means over
/// examples, perplexity pools every gold token.
pub fn aggregate(
    corpus: &Corpus,
    results: &[ExampleResult],
    embeddings: Option<&EmbeddingTable>,
) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let n = results.len() as f64;
    let nlls: Vec<f64> = results.iter().flat_map(|r| r.gold_nlls.iter().copied()).collect();
    let bow = embeddings.map(|table| {
        let scores: Vec<_> = results
            .iter()
            .map(|r| bow_metrics(&r.text, &corpus.examples[r.example_id].response, table))
            .collect();
        let mean = |f: fn(&crate::metrics::BowScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
        (mean(|s| s.average), mean(|s| s.extrema), mean(|s| s.greedy))
    });
    // gold indices are read here and nowhere else
    let pairs: Vec<(usize, usize)> = results
        .iter()
        .filter_map(|r| {
            let gold = corpus.examples[r.example_id].gold_knowledge_index?;
            let first = *r.selection.as_ref()?.indices.first()?;
            Some((first, gold))
        })
        .collect();
    let accuracy = if pairs.is_empty() {
        None
    } else {
        let (pred, gold): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        Some(selection_accuracy(&pred, &gold)?)
    };
    Ok(MetricsReport {
        ppl: perplexity(&nlls)?,
        f1: results.iter().map(|r| r.f1).sum::<f64>() / n,
        average: bow.map(|b| b.0),
        extrema: bow.map(|b| b.1),
        greedy: bow.map(|b| b.2),
        selection_accuracy: accuracy,
        n_examples: results.len(),
    })
}

pub fn evaluate_with_results(
    models: &Models,
    corpus: &Corpus,
    settings: &EvalSettings<'_>,
    tokenizer: &dyn Tokenizer,
) -> Result<(MetricsReport, Vec<ExampleResult>)> {
    let results = corpus
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| evaluate_example(models, i, ex, settings, tokenizer))
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(corpus, &results, settings.embeddings)?;
    Ok((report, results))
}

pub fn evaluate(
    models: &Models,
    corpus: &Corpus,
    settings: &EvalSettings<'_>,
    tokenizer: &dyn Tokenizer,
) -> Result<MetricsReport> {
    Ok(evaluate_with_results(models, corpus, settings, tokenizer)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    TMax,
    TruncBudget,
}

impl std::str::FromStr for SweepVariable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t_max" => Ok(Self::TMax),
            "trunc_budget" => Ok(Self::TruncBudget),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep variable `{other}` (expected t_max or trunc_budget)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub variable: SweepVariable,
    pub rows: Vec<SweepRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl SweepTable {
    /// Aligned plain-text table, one row per value.
    pub fn to_text(&self) -> String {
        let name = match self.variable {
            SweepVariable::TMax => "t_max",
            SweepVariable::TruncBudget => "trunc_budget",
        };
        let mut lines = vec![format!(
            "{name:>12} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "ppl", "f1", "average", "extrema", "greedy", "sel_acc"
        )];
        for row in &self.rows {
            let r = &row.report;
            lines.push(format!(
                "{:>12} {:>10.4} {:>8.4} {:>8} {:>8} {:>8} {:>8}",
                row.value,
                r.ppl,
                r.f1,
                fmt_opt(r.average),
                fmt_opt(r.extrema),
                fmt_opt(r.greedy),
                fmt_opt(r.selection_accuracy)
            ));
        }
        lines.join("\n") + "\n"
    }

    /// One JSON record per row.
    pub fn to_json_lines(&self) -> String {
        self.rows
            .iter()
            .map(|row| serde_json::to_string(row).expect("row serialises") + "\n")
            .collect()
    }
}

/// One evaluation per value with everything else fixed.
pub fn sweep(
    models: &Models,
    corpus: &Corpus,
    variable: SweepVariable,
    values: &[usize],
    response_budget: usize,
    embeddings: Option<&EmbeddingTable>,
    tokenizer: &dyn Tokenizer,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    if let Some(bad) = values.iter().find(|&&v| v == 0) {
        return Err(Error::InvalidArgument(format!("sweep value {bad} must be positive")));
    }
    let rows = values
        .iter()
        .map(|&value| {
            let assembly = match variable {
                SweepVariable::TMax => Assembly::Select { t_max: value },
                SweepVariable::TruncBudget => Assembly::Truncate { budget: value },
            };
            let settings = EvalSettings {
                assembly,
                response_budget,
                embeddings,
            };
            Ok(SweepRow {
                value,
                report: evaluate(models, corpus, &settings, tokenizer)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { variable, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;
    use crate::synthetic::{toy_corpus, ToySpec};
    use crate::training::ModelConfig;

    fn setup() -> (Corpus, crate::corpus::Vocabulary, Models, ModelConfig) {
        let corpus = toy_corpus(ToySpec {
            examples: 4,
            knowledge_per_example: 3,
            seed: 2,
        });
        let vocab = build_vocabulary(&corpus, 200).unwrap();
        let mut mc = ModelConfig::toy();
        mc.encoder.width = 16;
        mc.encoder.heads = 2;
        mc.selector.hidden = 8;
        mc.generator.width = 16;
        mc.generator.heads = 2;
        mc.generator.layers = 1;
        mc.generator.capacity = 512;
        mc.response_budget = 8;
        let models = Models::new(&mc, vocab.len(), 1).unwrap();
        (corpus, vocab, models, mc)
    }

    #[test]
    fn report_is_consistent_and_repeatable() {
        let (corpus, vocab, models, mc) = setup();
        let settings = EvalSettings {
            assembly: Assembly::Select { t_max: 1 },
            response_budget: mc.response_budget,
            embeddings: None,
        };
        let (report, results) = evaluate_with_results(&models, &corpus, &settings, &vocab).unwrap();
        assert_eq!(report.n_examples, 4);
        assert!(report.average.is_none());
        assert!(report.selection_accuracy.is_some());
        let all: Vec<f64> = results.iter().flat_map(|r| r.gold_nlls.clone()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!((report.ppl - mean.exp()).abs() < 1e-9 * report.ppl);
        assert_eq!(report, evaluate(&models, &corpus, &settings, &vocab).unwrap());
    }

    #[test]
    fn sweeps_have_one_row_per_value() {
        let (corpus, vocab, models, mc) = setup();
        let table = sweep(&models, &corpus, SweepVariable::TMax, &[1, 2, 3], mc.response_budget, None, &vocab).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert_eq!(table.to_text().lines().count(), 4);
        let single = sweep(&models, &corpus, SweepVariable::TMax, &[2], mc.response_budget, None, &vocab).unwrap();
        let settings = EvalSettings {
            assembly: Assembly::Select { t_max: 2 },
            response_budget: mc.response_budget,
            embeddings: None,
        };
        assert_eq!(single.rows[0].report, evaluate(&models, &corpus, &settings, &vocab).unwrap());
        let trunc = sweep(&models, &corpus, SweepVariable::TruncBudget, &[128, 256, 512], 8, None, &vocab).unwrap();
        assert_eq!(trunc.rows.len(), 3);
        assert!(trunc.rows.iter().all(|r| r.report.selection_accuracy.is_none()));
        assert!(sweep(&models, &corpus, SweepVariable::TMax, &[], 8, None, &vocab).is_err());
        assert!(sweep(&models, &corpus, SweepVariable::TMax, &[0], 8, None, &vocab).is_err());
        assert!(sweep(&models, &corpus, SweepVariable::TruncBudget, &[1024], 8, None, &vocab).is_err());
    }

    #[test]
    fn gold_indices_only_feed_selection_accuracy() {
        let (mut corpus, vocab, models, mc) = setup();
        let settings = EvalSettings {
            assembly: Assembly::Select { t_max: 1 },
            response_budget: mc.response_budget,
            embeddings: None,
        };
        let with_gold = evaluate(&models, &corpus, &settings, &vocab).unwrap();
        // point gold at whatever the selector picks
        for ex in corpus.examples.iter_mut() {
            ex.gold_knowledge_index = Some(greedy_select(&models, ex, 1, &vocab).unwrap().indices[0]);
        }
        let perfect = evaluate(&models, &corpus, &settings, &vocab).unwrap();
        assert_eq!(perfect.selection_accuracy, Some(1.0));
        for ex in corpus.examples.iter_mut() {
            ex.gold_knowledge_index = None;
        }
        let none = evaluate(&models, &corpus, &settings, &vocab).unwrap();
        assert_eq!(none.selection_accuracy, None);
        assert_eq!((none.ppl, none.f1), (with_gold.ppl, with_gold.f1));
    }
}
