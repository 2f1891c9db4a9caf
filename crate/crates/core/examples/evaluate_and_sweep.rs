//! Metrics reports for selected-knowledge and truncation inputs, and the
//! two sweeps.

use kgdial::corpus::build_vocabulary;
use kgdial::evaluation::{evaluate, sweep, Assembly, EvalSettings, SweepVariable};
use kgdial::metrics::EmbeddingTable;
use kgdial::pseudo::build_warmup_corpora;
use kgdial::synthetic::{toy_corpus, ToySpec};
use kgdial::training::{ModelConfig, Models, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let corpus = toy_corpus(ToySpec::default());
    let vocab = build_vocabulary(&corpus, 1000)?;
    let model_config = ModelConfig::toy();
    let config = TrainConfig {
        warmup_steps: 60,
        ..TrainConfig::toy()
    };
    let models = Models::new(&model_config, vocab.len(), config.seed)?;
    let mut trainer = Trainer::new(models, config, model_config, &vocab)?;
    trainer.warmup(&build_warmup_corpora(&corpus)?)?;

    // random vectors stand in for pre-trained embeddings
    let mut table = EmbeddingTable::new(4)?;
    for (i, word) in vocab.tokens().iter().enumerate() {
        let v = (0..4).map(|d| ((i * 7 + d * 13) % 11) as f64 - 5.0).collect();
        table.insert(word.clone(), v)?;
    }
    let budget = model_config.response_budget;
    for assembly in [Assembly::Select { t_max: 1 }, Assembly::Truncate { budget: 52 }] {
        let settings = EvalSettings {
            assembly,
            response_budget: budget,
            embeddings: Some(&table),
        };
        println!("{assembly:?}: {}", evaluate(&trainer.models, &corpus, &settings, &vocab)?.to_json_line());
    }

    let t_max = sweep(&trainer.models, &corpus, SweepVariable::TMax, &[1, 2, 3], budget, None, &vocab)?;
    print!("{}", t_max.to_text());
    let trunc = sweep(
        &trainer.models,
        &corpus,
        SweepVariable::TruncBudget,
        &[48, 54, 60],
        budget,
        None,
        &vocab,
    )?;
    print!("{}", trunc.to_text());
    print!("{}", trunc.to_json_lines());
    Ok(())
}
