//! Warm-up of selector and generator on pseudo labels.
//!
//! `cargo run --release --example warmup -- 300`

use kgdial::corpus::build_vocabulary;
use kgdial::pseudo::build_warmup_corpora;
use kgdial::synthetic::{toy_corpus, ToySpec};
use kgdial::training::{ModelConfig, Models, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let steps: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let corpus = toy_corpus(ToySpec::default());
    let vocab = build_vocabulary(&corpus, 1000)?;
    let corpora = build_warmup_corpora(&corpus)?;
    let model_config = ModelConfig::toy();
    let config = TrainConfig {
        warmup_steps: steps,
        ..TrainConfig::toy()
    };
    let models = Models::new(&model_config, vocab.len(), config.seed)?;
    let mut trainer = Trainer::new(models, config, model_config, &vocab)?;
    let records = trainer.warmup(&corpora)?;
    for r in records.iter().filter(|r| r.step % 25 == 0 || r.step + 1 == steps) {
        println!(
            "step {:>4}: selector NLL {:.4}  generator NLL {:.4}",
            r.step, r.selector_nll, r.generator_nll
        );
    }
    Ok(())
}
